"""Heun integration of the flow ODE from noise (t = 1) to data (t = 0) with
classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .conditioning import CondBundle, null_condition
from .numerics.errors import DimensionError, NumericError
from .numerics.rng import Rng

Field = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 7.5
    churn: float = 0.0
    seed: int = 0
    final_euler: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.guidance < 0:
            raise ValueError(f"guidance must be >= 0, got {self.guidance}")
        if self.churn < 0:
            raise ValueError(f"churn must be >= 0, got {self.churn}")


def cfg_combine(cond_pred, uncond_pred, w: float):
    """``uncond + w (cond - uncond)``; w = 1 and w = 0 return the inputs unchanged."""
    if np.shape(cond_pred) != np.shape(uncond_pred):
        raise DimensionError(f"{np.shape(cond_pred)} vs {np.shape(uncond_pred)}")
    if w == 1:
        return np.array(cond_pred, copy=True)
    if w == 0:
        return np.array(uncond_pred, copy=True)
    return uncond_pred + w * (cond_pred - uncond_pred)


def time_grid(steps: int) -> np.ndarray:
    return np.array([(steps - i) / steps for i in range(steps + 1)])


def _churn(z, t, t_hat, rng: Rng):
    """Re-noise ``z_t`` to ``z_{t_hat}`` along the rectified-flow marginals."""
    a = (1 - t_hat) / (1 - t)
    std = np.sqrt(max(t_hat * t_hat - (a * t) ** 2, 0.0))
    return a * z + std * rng.normal(z.shape, dtype=z.dtype)


def heun_integrate(field: Field, z_start: np.ndarray, config: SamplerConfig = SamplerConfig(), rng: Rng | None = None):
    """Integrate ``dz/dt = -field(z, t)`` from t = 1 down to t = 0.

    Each step takes an Euler proposal and averages the slopes at both ends.
    With ``final_euler`` the last step stops at the proposal so the field is
    never evaluated at t = 0.
    """
    ts = time_grid(config.steps)
    z = z_start
    if config.churn > 0 and rng is None:
        rng = Rng(config.seed, 0xC4)
    for i in range(config.steps):
        t, t_next = float(ts[i]), float(ts[i + 1])
        if config.churn > 0 and t < 1:
            t_hat = min(1.0, t + config.churn * (t - t_next))
            if t_hat < 1.0:
                z = _churn(z, t, t_hat, rng)
                t = t_hat
        h = t_next - t
        v = -field(z, t)
        z_prop = z + h * v
        if t_next > 0 or not config.final_euler:
            z = z + 0.5 * h * (v - field(z_prop, t_next))
        else:
            z = z_prop
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at step {i}")
    return z


def guided_field(cond_fn: Field, uncond_fn: Field, w: float) -> Field:
    if w == 1:
        return cond_fn
    if w == 0:
        return uncond_fn
    return lambda z, t: cfg_combine(cond_fn(z, t), uncond_fn(z, t), w)


def generate(model, cond: CondBundle, config: SamplerConfig = SamplerConfig(), rng: Rng | None = None) -> np.ndarray:
    """Sample latents for each row of ``cond`` starting from N(0, I)."""
    mc = model.config
    rng = rng or Rng(config.seed)
    noise_rng, churn_rng = rng.split(2)
    b = cond.batch
    shape = (b, mc.latent_size, mc.latent_size, mc.latent_channels)
    z = noise_rng.normal(shape, dtype=model.store.dtype)
    null = null_condition(mc.text_len, mc.text_width, b, dtype=model.store.dtype)

    def cond_fn(x, t):
        return model(x, cond, np.full(b, t))

    def uncond_fn(x, t):
        return model(x, null, np.full(b, t))

    return heun_integrate(guided_field(cond_fn, uncond_fn, config.guidance), z, config, churn_rng)
