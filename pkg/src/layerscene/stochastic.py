"""Distributions, reparameterised sampling, divergences and training schedules.

All randomness is injected: callers draw standard-normal or Gumbel noise from
a seeded generator and pass it in, so every forward pass is reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, exp, log_softmax, mean, softmax, stack, tabs, xlogx
from .autodiff.tensor import ShapeError, scale


@dataclass
class DiagGaussian:
    """Diagonal Gaussian parameterised by mean and log-variance (last axis = dims)."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeError("DiagGaussian", self.mean.shape, self.log_var.shape)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def from_params(cls, params: Tensor) -> "DiagGaussian":
        """Split a ``[..., 2D]`` network output into mean and log-variance halves."""
        d = params.shape[-1] // 2
        return cls(params[..., :d], params[..., d:])

    @classmethod
    def standard(cls, shape, dtype=np.float32) -> "DiagGaussian":
        z = np.zeros(shape, dtype=dtype)
        return cls(Tensor(z), Tensor(z.copy()))


@dataclass
class PositionDistribution:
    logits: Tensor
    temperature: float

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    def probs(self) -> Tensor:
        return spatial_softmax(self.logits)


def sample_gaussian(d: DiagGaussian, noise) -> Tensor:
    """Reparameterised draw ``mean + exp(log_var / 2) * noise``."""
    noise = noise if isinstance(noise, Tensor) else Tensor(np.asarray(noise, dtype=d.mean.dtype))
    if noise.shape != d.mean.shape:
        raise ShapeError("sample_gaussian", d.mean.shape, noise.shape)
    return d.mean + exp(scale(d.log_var, 0.5)) * noise


def kl_gaussian_std(d: DiagGaussian) -> Tensor:
    """KL(d || N(0, I)) summed over the last axis."""
    terms = d.mean * d.mean + exp(d.log_var) - 1.0 - d.log_var
    return scale(terms.sum(axis=-1), 0.5)


def kl_gaussian(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError("kl_gaussian", q.mean.shape, p.mean.shape)
    r = q.mean - p.mean
    terms = (exp(q.log_var) + r * r) * exp(-p.log_var) - 1.0 + p.log_var - q.log_var
    return scale(terms.sum(axis=-1), 0.5)


def gaussian_nll(x: Tensor, d: DiagGaussian) -> Tensor:
    """Negative log density of ``x`` under ``d``, summed over the last axis."""
    r = x - d.mean
    terms = r * r * exp(-d.log_var) + d.log_var + math.log(2 * math.pi)
    return scale(terms.sum(axis=-1), 0.5)


def spatial_softmax(logits: Tensor) -> Tensor:
    """Softmax over the last two axes (one categorical over all pixels)."""
    shape = logits.shape
    flat = logits.reshape(shape[:-2] + (shape[-2] * shape[-1],))
    return softmax(flat, axis=-1).reshape(shape)


def spatial_log_softmax(logits: Tensor) -> Tensor:
    shape = logits.shape
    flat = logits.reshape(shape[:-2] + (shape[-2] * shape[-1],))
    return log_softmax(flat, axis=-1).reshape(shape)


def gumbel_noise(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """``-log(-log(u))`` with ``u ~ U(0, 1)`` bounded away from 0 and 1."""
    tiny = np.finfo(np.float64).tiny
    u = rng.uniform(tiny, 1.0, size=shape)
    return (-np.log(-np.log(u))).astype(dtype)


def sample_position(p: PositionDistribution, noise) -> Tensor:
    """Gumbel-Softmax relaxed sample: ``softmax((logits + noise) / temperature)``."""
    noise = noise if isinstance(noise, Tensor) else Tensor(np.asarray(noise, dtype=p.logits.dtype))
    if noise.shape != p.logits.shape:
        raise ShapeError("sample_position", p.logits.shape, noise.shape)
    return spatial_softmax(scale(p.logits + noise, 1.0 / p.temperature))


def hard_position(weights: np.ndarray) -> np.ndarray:
    """One-hot map at the argmax of each ``[..., N, N]`` weight map."""
    w = np.asarray(weights)
    flat = w.reshape(w.shape[:-2] + (-1,))
    out = np.zeros_like(flat)
    np.put_along_axis(out, flat.argmax(axis=-1)[..., None], 1, axis=-1)
    return out.reshape(w.shape)


def gumbel_temperature(epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return 0.3 * 2.0 ** (0.0001 * epoch)


def sigma_schedule(epoch: int) -> float:
    """Pixel noise std: 0.01/sqrt(3) for epochs 1-150, 0.01/sqrt(5) afterwards.

    Epochs are counted from 0 here, so epoch index ``e`` is training epoch ``e + 1``.
    """
    return 0.01 / math.sqrt(3) if epoch < 150 else 0.01 / math.sqrt(5)


def aggregated_position_l1(posteriors: Tensor | Sequence[Tensor], tol: float = 1e-3) -> Tensor:
    """L1 distance between the mean position posterior and the uniform map.

    ``posteriors`` is a ``[..., N, N]`` stack (any leading batch/object axes) or
    a list of ``N x N`` maps; each must sum to one within ``tol``.
    """
    if not isinstance(posteriors, Tensor):
        posteriors = stack(list(posteriors), axis=0)
    N2 = posteriors.shape[-2] * posteriors.shape[-1]
    sums = posteriors.data.reshape(-1, N2).sum(axis=1)
    if np.any(np.abs(sums - 1) > tol):
        raise ValueError("aggregated_position_l1: posteriors must be normalised")
    flat = posteriors.reshape((-1, N2))
    agg = mean(flat, axis=0)
    return tabs(agg - 1.0 / N2).sum()


def gaussian_log_likelihood(x, mean_img: Tensor, sigma: float) -> Tensor:
    """Sum over all entries of ``log N(x | mean, sigma^2)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=mean_img.dtype))
    if x.shape != mean_img.shape:
        raise ShapeError("gaussian_log_likelihood", x.shape, mean_img.shape)
    r = x - mean_img
    const = -0.5 * math.log(2 * math.pi * sigma * sigma) * x.size
    return scale((r * r).sum(), -0.5 / (sigma * sigma)) + const


def alpha_entropy_regularizer(alpha: Tensor) -> Tensor:
    """Sum of ``alpha * log(alpha)`` with ``0 log 0 = 0``."""
    return xlogx(alpha).sum()


def categorical_cross_entropy(logits: Tensor, target_index: np.ndarray) -> Tensor:
    """Cross-entropy of spatial logits ``[..., N, N]`` against flat pixel indices ``[...]``."""
    logp = spatial_log_softmax(logits)
    shape = logp.shape
    flat = logp.reshape((-1, shape[-2] * shape[-1]))
    rows = np.arange(flat.shape[0])
    picked = flat[rows, np.asarray(target_index).reshape(-1)]
    return -picked.sum()


__all__ = [
    "DiagGaussian", "PositionDistribution", "aggregated_position_l1", "alpha_entropy_regularizer",
    "categorical_cross_entropy", "gaussian_log_likelihood", "gaussian_nll",
    "gumbel_noise", "gumbel_temperature", "hard_position", "kl_gaussian", "kl_gaussian_std", "sample_gaussian",
    "sample_position", "sigma_schedule", "spatial_log_softmax", "spatial_softmax",
]
