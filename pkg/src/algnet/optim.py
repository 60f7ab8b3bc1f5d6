"""Adam with bias correction and the cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from algnet.tensor import Parameter

ADAM_EPS = 1e-8


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = ADAM_EPS,
              names: Sequence[str] | None = None) -> None:
    """One Adam update in place, using each parameter's accumulated ``grad``.

    Every gradient is checked before anything is modified, so a non-finite
    gradient leaves parameters and moments untouched.
    """
    if len(state.m) != len(params):
        raise ValueError(f"adam: state holds {len(state.m)} moments for {len(params)} parameters")
    for i, p in enumerate(params):
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            label = names[i] if names else (p.name or f"#{i}")
            raise NonFiniteGradient(f"non-finite gradient in parameter {label}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def cosine_lr(step: int, total: int, lr_init: float = 5e-4, lr_min: float = 1e-7) -> float:
    if total <= 0:
        raise ValueError("cosine_lr: total must be positive")
    if step < 0:
        raise ValueError("cosine_lr: step must be nonnegative")
    if step >= total:
        return lr_min
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total))
