"""Adam optimizer with bias correction and a linear learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


@dataclass
class LrSchedule:
    """Linear interpolation from ``lr`` to ``lr_end`` over ``total_steps``.

    ``lr_end=None`` means a constant rate. Steps past ``total_steps`` stay
    at ``lr_end``.
    """

    lr: float
    lr_end: float | None = None
    total_steps: int = 0

    def at(self, t: int) -> float:
        if self.lr_end is None or self.total_steps <= 0:
            return self.lr
        frac = min(max(t, 0), self.total_steps) / self.total_steps
        return self.lr + (self.lr_end - self.lr) * frac


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter path."""

    schedule: LrSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor],
              grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    The learning rate for step t (1-based) comes from the schedule at t-1,
    so the very first step uses the initial rate.
    """
    lr = state.schedule.at(state.t)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for path, p in params.items():
        g = grads[path]
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter '{path}' {p.data.shape}")
        if path not in state.m:
            state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
