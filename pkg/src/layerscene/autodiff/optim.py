"""Adam with bias correction, in a functional core plus a small stateful wrapper."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Apply one bias-corrected Adam update in place.

    Parameters without a gradient entry (or with ``None``) are left untouched
    and their moments are not advanced.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step[{name}]", p.shape, g.shape)
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / dt(1 - beta1 ** t)
        v_hat = v / dt(1 - beta2 ** t)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))


class Adam:
    """Adam over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()},
                  self.state, self.lr, self.betas[0], self.betas[1], self.eps)
