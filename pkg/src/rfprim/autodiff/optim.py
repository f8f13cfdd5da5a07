"""Adam with bias correction and the exponential learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np

LR_START = 3e-4
LR_END = 3e-5


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step would consume a NaN/inf gradient."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[Hashable, np.ndarray],
              grads: Mapping[Hashable, np.ndarray], lr: float,
              lr_scale: Mapping[Hashable, float] | None = None) -> dict:
    """Return updated parameters; ``state`` advances in place.

    Keys missing from ``grads`` are treated as zero gradient.  A non-finite
    gradient rejects the whole step and leaves ``state`` untouched.
    ``lr_scale`` optionally multiplies the rate per key.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k!r}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[k] = m
        state.v[k] = v
        step = lr if lr_scale is None else lr * lr_scale.get(k, 1.0)
        out[k] = p - step * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def lr_schedule(it: int, total: int, lr_start: float = LR_START, lr_end: float = LR_END) -> float:
    """Geometric interpolation from ``lr_start`` to ``lr_end`` over ``total`` steps."""
    if total <= 0:
        return lr_start
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    return lr_start * (lr_end / lr_start) ** (it / total)
