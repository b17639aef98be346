from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError
from .params import Param


@dataclass
class OptimState:
    """Adaptive-moment state, one slot per unique parameter."""

    lr: float = 1e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def optim_step(state: OptimState, params: list[Param], grads: list[np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update applied in place.

    ``grads`` defaults to each parameter's accumulated ``.grad``.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise DimensionError(f"{p.name}: grad {g.shape} vs param {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {p.name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.b1**t
    c2 = 1.0 - state.b2**t
    for p, g in zip(params, grads):
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.value)
            state.v[key] = np.zeros_like(p.value)
        v = state.v[key]
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= (state.lr * update).astype(p.value.dtype, copy=False)
