"""Rectified-flow objective.

Convention, used everywhere in the package: ``z_t = (1 - t) z0 + t eps``, the
network regresses ``z0 - eps`` (the negative path velocity), so noise sits at
t = 1 and data at t = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import kernels as K
from .numerics.errors import DimensionError
from .numerics.rng import Rng


@dataclass(frozen=True)
class TimestepDist:
    """Logit-normal: ``t = sigmoid(loc + scale * n)``, ``n ~ N(0, 1)``."""

    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass
class FlowBatch:
    z0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    z_t: np.ndarray
    target: np.ndarray


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def sample_timestep(dist: TimestepDist, rng: Rng, size=()) -> np.ndarray:
    return timestep_from_normal(dist, rng.normal(size))


def timestep_from_normal(dist: TimestepDist, n) -> np.ndarray:
    return sigmoid(dist.loc + dist.scale * np.asarray(n, dtype=np.float64))


def interpolate(z0, eps, t):
    tb = np.asarray(t).reshape((-1,) + (1,) * (np.ndim(z0) - 1)) if np.ndim(t) else t
    return (1 - tb) * z0 + tb * eps


def make_batch(z0: np.ndarray, rng: Rng, dist: TimestepDist = TimestepDist(), t=None, eps=None) -> FlowBatch:
    """Draw noise and timesteps (unless given) and build the interpolant and target."""
    b = z0.shape[0]
    if eps is None:
        eps = rng.normal(z0.shape, dtype=z0.dtype)
    if t is None:
        t = sample_timestep(dist, rng, (b,))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    z_t = interpolate(z0, eps, t).astype(z0.dtype, copy=False)
    return FlowBatch(z0, eps, t, z_t, z0 - eps)


def flow_loss(pred: np.ndarray, batch: FlowBatch) -> float:
    """Mean squared error against ``z0 - eps``, averaged over batch and elements."""
    if pred.shape != batch.target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {batch.target.shape}")
    return K.mse_fwd(pred, batch.target)[0]


def flow_loss_grad(pred: np.ndarray, batch: FlowBatch) -> tuple[float, np.ndarray]:
    loss, r = K.mse_fwd(pred, batch.target)
    return loss, K.mse_bwd(r)


def oracle_gain(t, sigma):
    """Coefficient k(t) of the optimal predictor for z0 ~ N(mu, sigma^2 I)."""
    t = np.asarray(t, dtype=np.float64)
    s2 = sigma * sigma
    return ((1 - t) * s2 - t) / ((1 - t) ** 2 * s2 + t * t)


def gaussian_oracle(z_t, t, mu, sigma):
    """``E[z0 - eps | z_t]`` for Gaussian data z0 ~ N(mu, sigma^2 I)."""
    t = np.asarray(t, dtype=np.float64)
    tb = t.reshape((-1,) + (1,) * (np.ndim(z_t) - 1)) if t.ndim else t
    k = oracle_gain(tb, sigma)
    return mu + k * (z_t - (1 - tb) * mu)


def oracle_min_loss(t, sigma):
    """Per-element ``Var(z0 - eps | z_t)``: the smallest achievable loss at t."""
    t = np.asarray(t, dtype=np.float64)
    s2 = sigma * sigma
    return (s2 + 1) - ((1 - t) * s2 - t) ** 2 / ((1 - t) ** 2 * s2 + t * t)


def expected_min_loss(sigma: float, dist: TimestepDist = TimestepDist(), nodes: int = 200) -> float:
    """``E_t[Var(z0 - eps | z_t)]`` under the logit-normal by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    t = timestep_from_normal(dist, x)
    return float(np.sum(w * oracle_min_loss(t, sigma)) / np.sqrt(2 * np.pi))
