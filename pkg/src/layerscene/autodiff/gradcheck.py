"""Central finite-difference checks for reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``x.data``.

    ``x`` is perturbed in place. When ``indices`` is given only those entries
    are estimated and the result is a flat array in the same order.
    """
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else [np.ravel_multi_index(i, x.shape) for i in indices]
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        out.append((fp - fm) / (2 * eps))
    out = np.asarray(out)
    return out.reshape(x.shape) if indices is None else out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``; 0 when the denominator vanishes.

    ``floor`` keeps gradients that are exactly zero (e.g. a bias under a
    shift-invariant softmax) from turning finite-difference noise into error 1.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 0.0, joint: bool = False) -> float:
    """Relative error between analytic and numerical gradients over ``inputs``.

    By default the worst error over the inputs is returned; with ``joint`` the
    checked entries of all inputs are compared as one vector. With
    ``max_entries``, a random subset of each input's entries is checked.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    pairs = []
    for t, g in zip(inputs, analytic):
        if max_entries is not None and t.size > max_entries:
            flat = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in flat]
            num = numerical_grad(fn, t, eps, indices)
            ana = np.array([g[i] for i in indices])
        else:
            num = numerical_grad(fn, t, eps)
            ana = g
        pairs.append((np.ravel(ana), np.ravel(num)))
    if joint:
        return relative_error(np.concatenate([a for a, _ in pairs]),
                              np.concatenate([n for _, n in pairs]), floor)
    return max((relative_error(a, n, floor) for a, n in pairs), default=0.0)
