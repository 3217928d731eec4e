"""Two-stage training loops.

Stage 1 fits the encoders and decoders against independent priors; stage 2
fits the scene encoder and both prior networks with stage 1 frozen. Every
batch and noise draw is a pure function of ``(seed, step)``, so a run resumed
from a checkpoint matches an uninterrupted one bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..autodiff import AdamState, Tensor, adam_step, no_grad
from ..stochastic import gumbel_temperature, sigma_schedule
from .config import ModelConfig, TrainConfig
from .core import Noise, NumericalError, elbo, stage2_loss
from .networks import Params, stage_of


@dataclass
class TrainResult:
    params: Params
    optimizer: AdamState
    rows: list[dict] = field(default_factory=list)
    val_rows: list[dict] = field(default_factory=list)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def epoch_of(step: int, n: int, batch_size: int) -> int:
    return step // steps_per_epoch(n, batch_size)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for ``step``: consecutive slices of a per-epoch permutation."""
    if n < 1:
        raise ValueError("empty dataset")
    b = min(batch_size, n)
    spe = steps_per_epoch(n, b)
    perm = np.random.default_rng([seed, 0, step // spe]).permutation(n)
    k = step % spe
    return perm[k * b:(k + 1) * b]


def step_noise(config: ModelConfig, seed: int, stage: int, step: int, batch: int, dtype) -> Noise:
    return Noise.draw(np.random.default_rng([seed, stage, step]), config, batch, dtype)


def validation_noise(config: ModelConfig, seed: int, batch: int, dtype) -> Noise:
    return Noise.draw(np.random.default_rng([seed, 9]), config, batch, dtype)


def validation_loss(params: Params, config: ModelConfig, images: np.ndarray, noise: Noise) -> float:
    """Negative ELBO of a fixed batch, with the epoch-0 temperature and noise level."""
    with no_grad():
        return -elbo(params, config, images, noise, epoch=0).total


def _subset(params: Params, stage: int) -> Params:
    return {k: v for k, v in params.items() if stage_of(k) == stage}


def _run(stage: int, images: np.ndarray, config: ModelConfig, tcfg: TrainConfig, params: Params,
         optimizer: AdamState | None, start: int, stop: int, loss_fn,
         val_images: np.ndarray | None, callback: Callable | None) -> TrainResult:
    if len(images) == 0:
        raise ValueError("empty dataset")
    dtype = next(iter(params.values())).dtype
    images = np.asarray(images, dtype=dtype)
    trainable = _subset(params, stage)
    optimizer = optimizer if optimizer is not None else AdamState()
    result = TrainResult(params, optimizer)
    val_noise = None
    if stage == 1 and val_images is not None:
        val_images = np.asarray(val_images[:tcfg.val_size], dtype=dtype)
        val_noise = validation_noise(config, tcfg.seed, len(val_images), dtype)

    def record_val(step):
        if val_noise is not None:
            result.val_rows.append({"step": step,
                                    "val_loss": validation_loss(params, config, val_images, val_noise)})

    if start == 0:
        record_val(0)
    for step in range(start, stop):
        idx = batch_indices(len(images), tcfg.batch_size, tcfg.seed, step)
        epoch = epoch_of(step, len(images), min(tcfg.batch_size, len(images)))
        noise = step_noise(config, tcfg.seed, stage, step, len(idx), dtype)
        for p in params.values():
            p.grad = None
        try:
            parts = loss_fn(images[idx], noise, epoch)
        except NumericalError as e:
            raise NumericalError(f"stage {stage} step {step}", {**e.diagnostics, "step": step}) from e
        parts.objective.backward()
        grads = {k: p.grad for k, p in trainable.items()}
        bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
        if bad:
            raise NumericalError(f"stage {stage} step {step}", {"non_finite_gradients": bad, "step": step})
        adam_step({k: p.data for k, p in trainable.items()}, grads, optimizer, lr=tcfg.lr)
        row = {"step": step + 1, "epoch": epoch}
        if stage == 1:
            row.update(temperature=gumbel_temperature(epoch), sigma=sigma_schedule(epoch))
        row.update(parts.as_dict())
        result.rows.append(row)
        done = step + 1
        if done % tcfg.val_every == 0 or done == stop:
            record_val(done)
        if callback is not None:
            callback(stage, done, result)
    for p in params.values():
        p.grad = None
    return result


def train_stage1(images: np.ndarray, config: ModelConfig, tcfg: TrainConfig, params: Params,
                 optimizer: AdamState | None = None, start: int = 0, stop: int | None = None,
                 val_images: np.ndarray | None = None, callback: Callable | None = None) -> TrainResult:
    """Maximise the ELBO with standard object priors and the uniform position prior.

    Only stage-1 parameters are updated. ``callback(stage, step, result)``
    runs after every step, e.g. to write checkpoints.
    """
    def loss(x, noise, epoch):
        parts = elbo(params, config, x, noise, epoch=epoch)
        parts.objective = -parts.objective
        return parts

    stop = tcfg.stage1_steps if stop is None else stop
    return _run(1, images, config, tcfg, params, optimizer, start, stop, loss, val_images, callback)


def train_stage2(images: np.ndarray, config: ModelConfig, tcfg: TrainConfig, params: Params,
                 optimizer: AdamState | None = None, start: int = 0, stop: int | None = None,
                 callback: Callable | None = None) -> TrainResult:
    """Fit the scene encoder and prior networks to the frozen posterior modes."""
    missing = [p for p in ("enc_pos.head.w", "dec_obj.fc.w") if p not in params]
    if missing:
        raise ValueError(f"stage 2 needs stage-1 parameters, missing {missing}")

    def loss(x, noise, epoch):
        return stage2_loss(params, config, x, noise)

    stop = tcfg.stage2_steps if stop is None else stop
    return _run(2, images, config, tcfg, params, optimizer, start, stop, loss, None, callback)


def snapshot(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def as_tensors(arrays: dict[str, np.ndarray]) -> Params:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


__all__ = [
    "TrainResult", "as_tensors", "batch_indices", "epoch_of", "snapshot", "step_noise",
    "steps_per_epoch", "train_stage1", "train_stage2", "validation_loss", "validation_noise",
]
