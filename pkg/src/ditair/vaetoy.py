"""Tiny convolutional VAE (4x spatial compression) with latent widening.

Progressive pipeline: train with ``c1`` latent channels, widen the latent head
and the first decoder convolution to ``c2`` channels, keep training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import kernels as K
from .numerics.errors import ConfigError, DimensionError, NumericError
from .numerics.optim import OptimState, optim_step
from .numerics.params import Param, ParamStore
from .numerics.rng import Rng

NEW_SLICE_STD = 0.01


@dataclass(frozen=True)
class VaeConfig:
    image_size: int = 8
    image_channels: int = 1
    hidden: int = 8
    c1: int = 4
    c2: int = 8
    beta: float = 1e-3
    steps_stage1: int = 200
    steps_stage2: int = 200
    batch: int = 32
    lr: float = 2e-3
    log_every: int = 50

    def __post_init__(self):
        if self.c2 <= self.c1:
            raise ConfigError(f"c2 ({self.c2}) must exceed c1 ({self.c1})")
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.image_size % 4:
            raise ConfigError("image size must be divisible by 4")


class Conv:
    def __init__(self, store: ParamStore, name, cin, cout, stride=1, k=3):
        self.stride = stride
        self.pad = k // 2
        self.w = store.new(f"{name}.weight", (k, k, cin, cout), init="normal", std=1.0 / np.sqrt(k * k * cin))
        self.b = store.new(f"{name}.bias", (cout,), kind="bias", init="zeros")

    def fwd(self, x):
        return K.conv2d_fwd(x, self.w.value, self.b.value, self.stride, self.pad)

    def bwd(self, cache, dy):
        dx, dw, db = K.conv2d_bwd(cache, dy, self.w.value)
        self.w.accumulate(dw)
        self.b.accumulate(db)
        return dx


class VaeModel:
    def __init__(self, config: VaeConfig, channels: int, rng: Rng, dtype=np.float32):
        self.config = config
        self.channels = channels
        h, ci = config.hidden, config.image_channels
        self.store = ParamStore(rng=rng, dtype=dtype)
        s = self.store
        self.enc0 = Conv(s, "enc0", ci, h)
        self.enc1 = Conv(s, "enc1", h, 2 * h, stride=2)
        self.enc2 = Conv(s, "enc2", 2 * h, 2 * h, stride=2)
        self.head = Conv(s, "latent_head", 2 * h, 2 * channels)
        self.dec0 = Conv(s, "dec0", channels, 2 * h)
        self.dec1 = Conv(s, "dec1", 2 * h, h)
        self.dec2 = Conv(s, "dec2", h, h)
        self.out = Conv(s, "dec_out", h, ci)

    @property
    def params(self) -> list[Param]:
        return self.store.params

    def encode(self, x):
        """Posterior ``(mean, logvar)``, each (B, H/4, W/4, c)."""
        return self._encode(x)[0]

    def _encode(self, x):
        caches = []
        h = x
        for conv in (self.enc0, self.enc1, self.enc2):
            h, c1 = conv.fwd(h)
            h, c2 = K.silu_fwd(h)
            caches.append((c1, c2))
        y, ch = self.head.fwd(h)
        c = self.channels
        return (y[..., :c], y[..., c:]), (caches, ch)

    def _encode_bwd(self, cache, dmean, dlogvar):
        caches, ch = cache
        dh = self.head.bwd(ch, np.concatenate([dmean, dlogvar], axis=-1))
        for conv, (c1, c2) in zip(reversed((self.enc0, self.enc1, self.enc2)), reversed(caches)):
            dh = conv.bwd(c1, K.silu_bwd(c2, dh))
        return dh

    def decode(self, z):
        return self._decode(z)[0]

    def _decode(self, z):
        h, c0 = self.dec0.fwd(z)
        h, s0 = K.silu_fwd(h)
        h, _ = K.upsample2_fwd(h)
        h, c1 = self.dec1.fwd(h)
        h, s1 = K.silu_fwd(h)
        h, _ = K.upsample2_fwd(h)
        h, c2 = self.dec2.fwd(h)
        h, s2 = K.silu_fwd(h)
        y, c3 = self.out.fwd(h)
        return y, (c0, s0, c1, s1, c2, s2, c3)

    def _decode_bwd(self, cache, dy):
        c0, s0, c1, s1, c2, s2, c3 = cache
        dh = self.out.bwd(c3, dy)
        dh = K.upsample2_bwd(self.dec2.bwd(c2, K.silu_bwd(s2, dh)))
        dh = K.upsample2_bwd(self.dec1.bwd(c1, K.silu_bwd(s1, dh)))
        return self.dec0.bwd(c0, K.silu_bwd(s0, dh))

    def reconstruct(self, x):
        mean, _ = self.encode(x)
        return self.decode(mean)

    def loss_and_grads(self, x, noise):
        """MSE + beta * KL for one batch; accumulates gradients. Returns (total, mse, kl)."""
        beta = self.config.beta
        (mean, logvar), ce = self._encode(x)
        std = np.exp(0.5 * logvar)
        z = mean + std * noise
        recon, cd = self._decode(z)
        mse, r = K.mse_fwd(recon, x)
        kl_per = gaussian_kl(mean, logvar)
        kl = float(kl_per.mean())
        b = x.shape[0]
        dz = self._decode_bwd(cd, K.mse_bwd(r))
        dmean = dz + beta * mean / b
        dlogvar = dz * noise * 0.5 * std + beta * 0.5 * (np.exp(logvar) - 1.0) / b
        self._encode_bwd(ce, dmean, dlogvar)
        return mse + beta * kl, mse, kl


def gaussian_kl(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over all but the batch axis."""
    kl = 0.5 * (mean * mean + np.exp(logvar) - 1.0 - logvar)
    return kl.reshape(kl.shape[0], -1).sum(axis=1)


def measure_kl(model: VaeModel, data: np.ndarray) -> float:
    mean, logvar = model.encode(data)
    return float(gaussian_kl(mean, logvar).mean())


def make_textures(n: int, size: int, channels: int = 1, rng: Rng | None = None, dtype=np.float32) -> np.ndarray:
    """Sums of three random oriented gratings, (n, size, size, channels)."""
    rng = rng or Rng(0, 0x7E)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((n, size, size, channels))
    for _ in range(3):
        freq = 0.5 + 2.5 * rng.uniform((n, 1, 1, channels))
        ang = np.pi * rng.uniform((n, 1, 1, channels))
        phase = 2 * np.pi * rng.uniform((n, 1, 1, channels))
        amp = 0.2 + 0.3 * rng.uniform((n, 1, 1, channels))
        arg = (np.cos(ang) * xx[None, :, :, None] + np.sin(ang) * yy[None, :, :, None]) / size
        out += amp * np.sin(2 * np.pi * freq * arg + phase)
    return out.astype(dtype)


def _train(model: VaeModel, data, steps, rng: Rng, start_step: int = 0):
    cfg = model.config
    opt = OptimState(lr=cfg.lr)
    metrics = []
    batch_rng, noise_rng = rng.split(2)
    for i in range(steps):
        idx = batch_rng.integers(0, data.shape[0], (cfg.batch,))
        x = data[idx]
        lat = cfg.image_size // 4
        noise = noise_rng.normal((cfg.batch, lat, lat, model.channels), dtype=x.dtype)
        model.store.zero_grad()
        total, mse, kl = model.loss_and_grads(x, noise)
        if not np.isfinite(total):
            raise NumericError(f"VAE loss diverged at step {start_step + i}")
        optim_step(opt, model.params)
        step = start_step + i + 1
        if step % cfg.log_every == 0 or i == steps - 1:
            metrics.append((step, mse, kl))
    return metrics


def train_vae(config: VaeConfig, data, stage: int, rng: Rng, model: VaeModel | None = None, channels: int | None = None, steps: int | None = None):
    """Stage 1 trains a fresh model (``c1`` channels unless ``channels`` is given);
    stage 2 widens a stage-1 model to ``c2`` and continues.

    Returns ``(model, metrics)`` with metrics as ``(step, mse, kl)`` rows.
    """
    init_rng, train_rng, widen_rng = rng.split(3)
    if stage == 1:
        model = VaeModel(config, channels or config.c1, init_rng)
        return model, _train(model, data, config.steps_stage1 if steps is None else steps, train_rng)
    if stage == 2:
        if model is None:
            raise ConfigError("stage 2 needs a stage-1 model")
        wide = widen_latent(model, config.c2, widen_rng)
        wide.config = config
        n = config.steps_stage2 if steps is None else steps
        return wide, _train(wide, data, n, train_rng, start_step=config.steps_stage1)
    raise ConfigError(f"stage must be 1 or 2, got {stage}")


def widen_latent(model: VaeModel, c2: int, rng: Rng) -> VaeModel:
    """Replace the latent head and first decoder conv with ``c2``-channel versions.

    Original slices are copied; new slices start at ``0.01 * N(0, 1)`` (new
    biases at zero). Every other parameter is copied bit for bit.
    """
    c1 = model.channels
    if c2 <= c1:
        raise ConfigError(f"cannot widen {c1} channels to {c2}")
    wide = VaeModel(model.config, c2, Rng(0), dtype=model.store.dtype)
    old = {p.name: p for p in model.params}
    for p in wide.params:
        if p.name not in ("latent_head.weight", "latent_head.bias", "dec0.weight"):
            p.value[...] = old[p.name].value
    dt = model.store.dtype
    hw = old["latent_head.weight"].value
    w = (NEW_SLICE_STD * rng.normal(wide.head.w.shape)).astype(dt)
    w[..., :c1] = hw[..., :c1]
    w[..., c2 : c2 + c1] = hw[..., c1:]
    wide.head.w.value[...] = w
    hb = old["latent_head.bias"].value
    bias = np.zeros(2 * c2, dtype=dt)
    bias[:c1] = hb[:c1]
    bias[c2 : c2 + c1] = hb[c1:]
    wide.head.b.value[...] = bias
    dw = (NEW_SLICE_STD * rng.normal(wide.dec0.w.shape)).astype(dt)
    dw[:, :, :c1, :] = old["dec0.weight"].value
    wide.dec0.w.value[...] = dw
    return wide


def param_count(model: VaeModel) -> int:
    return model.store.count()


def load_vae(config: VaeConfig, entries) -> VaeModel:
    """Rebuild a model from checkpoint entries; latent width comes from ``dec0``."""
    by_name = dict(entries)
    if "dec0.weight" not in by_name:
        raise ValueError("checkpoint has no dec0.weight; not a VAE checkpoint")
    channels = by_name["dec0.weight"].shape[2]
    model = VaeModel(config, channels, Rng(0))
    names = {p.name for p in model.params}
    if names != set(by_name):
        raise ValueError(f"checkpoint tensors differ from model: {sorted(names ^ set(by_name))[:5]}")
    for p in model.params:
        if by_name[p.name].shape != p.shape:
            raise DimensionError(f"{p.name}: checkpoint {by_name[p.name].shape} vs model {p.shape}")
        p.value[...] = by_name[p.name]
    return model


def progressive_vs_scratch(config: VaeConfig, data, seed: int) -> dict[str, float]:
    """Final KL and MSE of c1->c2 progressive training against c2 from scratch,
    both given ``steps_stage1 + steps_stage2`` updates on the same data."""
    rng = Rng(seed, 0x5AE)
    prog_rng, scratch_rng = rng.split(2)
    r1, r2 = prog_rng.split(2)
    small, _ = train_vae(config, data, 1, r1)
    prog, prog_metrics = train_vae(config, data, 2, r2, model=small)
    total = config.steps_stage1 + config.steps_stage2
    scratch, scratch_metrics = train_vae(config, data, 1, scratch_rng, channels=config.c2, steps=total)
    return {
        "kl_progressive": measure_kl(prog, data),
        "kl_scratch": measure_kl(scratch, data),
        "mse_progressive": prog_metrics[-1][1],
        "mse_scratch": scratch_metrics[-1][1],
    }
