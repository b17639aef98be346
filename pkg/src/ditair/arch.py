"""PixArt-style, MMDiT, DiT-Air and DiT-Air-Lite behind one forward interface.

Token streams are indexed 0 = text, 1 = image; joint variants attend over the
text-then-image concatenation. All variants share the embedders, the
conditioning vector (timestep embedding + pooled text embedding) and the
AdaLN-modulated output head; they differ only in their blocks and in which
parameters are aliased across layers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import layers as L
from .conditioning import CondBundle
from .numerics import kernels as K
from .numerics.errors import ConfigError, DimensionError
from .numerics.params import ParamStore
from .numerics.rng import Rng

VARIANTS = (
    "pixart",
    "mmdit",
    "mmdit_shared_adaln",
    "dit_air",
    "dit_air_lite_full",
    "dit_air_lite_attention",
)
SIZE_PRESETS = {"S": 12, "B": 18, "L": 24, "XL": 30, "XXL": 38}
LITE_MODES = {"dit_air_lite_full": "full", "dit_air_lite_attention": "attention"}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dit_air"
    size: str | None = "B"
    n_layers: int | None = None
    d: int | None = None
    n_heads: int | None = None
    patch: int = 2
    latent_channels: int = 4
    latent_size: int = 8
    text_len: int = 4
    text_dim: int | None = None
    time_freq_dim: int = 256
    use_pooled: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.size is not None and self.size not in SIZE_PRESETS:
            raise ConfigError(f"unknown size {self.size!r}; expected one of {tuple(SIZE_PRESETS)}")
        if self.size is None and (self.n_layers is None or self.d is None):
            raise ConfigError("explicit configs need both n_layers and d")
        if self.size is not None and (self.n_layers is not None or self.d is not None):
            raise ConfigError("give either a size preset or explicit (n_layers, d), not both")
        n, d, h = self.layers, self.width, self.heads
        if n < 1 or d < 1:
            raise ConfigError(f"need n_layers >= 1 and d >= 1, got {n}, {d}")
        if d % h:
            raise ConfigError(f"d={d} not divisible by {h} heads")
        if (d // h) % 4:
            raise ConfigError(f"head dim {d // h} must be divisible by 4 for 2-D rotary")
        if self.patch < 1 or self.latent_size % self.patch:
            raise ConfigError(f"latent size {self.latent_size} not divisible by patch {self.patch}")

    @property
    def layers(self) -> int:
        return SIZE_PRESETS[self.size] if self.size is not None else int(self.n_layers)

    @property
    def width(self) -> int:
        return 64 * self.layers if self.size is not None else int(self.d)

    @property
    def heads(self) -> int:
        return self.n_heads if self.n_heads is not None else self.layers

    @property
    def text_width(self) -> int:
        return self.text_dim if self.text_dim is not None else self.width

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(z: np.ndarray, p: int) -> np.ndarray:
    """(B, h, w, c) -> (B, (h/p)(w/p), p*p*c), row-major over patches."""
    b, h, w, c = z.shape
    if h % p or w % p:
        raise DimensionError(f"latent {h}x{w} not divisible by patch {p}")
    x = z.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(x: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    b, _, pc = x.shape
    c = pc // (p * p)
    return x.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def timestep_features(t: np.ndarray, dim: int = 256, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 t``."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class JointBlock:
    """Attention over the text+image concatenation followed by per-stream MLPs.

    ``attn`` and ``mlp`` hold one module per stream; DiT-Air passes the same
    module twice (single-stream weights, dual-stream modulation).
    """

    def __init__(self, attn: list[L.AttnProj], mlp: list[L.Mlp], adaln: L.AdaLN | None = None):
        self.attn = attn
        self.mlp = mlp
        self.adaln = adaln

    def modules(self):
        out = [*self.attn, *self.mlp]
        return out + [self.adaln] if self.adaln is not None else out

    def fwd(self, xs, mods, angles_img):
        pre_a, hs = [], []
        for s in (0, 1):
            h, c = L.pre_fwd(xs[s], mods[:, s, 0], mods[:, s, 1])
            hs.append(h)
            pre_a.append(c)
        segs = [(hs[0], self.attn[0], None), (hs[1], self.attn[1], angles_img)]
        outs, c_attn = L.attention_fwd(segs, segs)
        post_a, xs1 = [], []
        for s in (0, 1):
            x, c = L.post_fwd(xs[s], outs[s], mods[:, s, 2])
            xs1.append(x)
            post_a.append(c)
        pre_m, mlp_c, post_m, xs2 = [], [], [], []
        for s in (0, 1):
            h, c1 = L.pre_fwd(xs1[s], mods[:, s, 3], mods[:, s, 4])
            m, c2 = self.mlp[s].fwd(h)
            x, c3 = L.post_fwd(xs1[s], m, mods[:, s, 5])
            pre_m.append(c1)
            mlp_c.append(c2)
            post_m.append(c3)
            xs2.append(x)
        return xs2, (pre_a, c_attn, post_a, pre_m, mlp_c, post_m)

    def bwd(self, cache, dxs):
        pre_a, c_attn, post_a, pre_m, mlp_c, post_m = cache
        b, d = dxs[0].shape[0], dxs[0].shape[-1]
        dmods = np.zeros((b, 2, 6, d), dtype=dxs[0].dtype)
        dxs1 = []
        for s in (0, 1):
            dx, dm, dmods[:, s, 5] = L.post_bwd(post_m[s], dxs[s])
            dh = self.mlp[s].bwd(mlp_c[s], dm)
            dxp, dmods[:, s, 3], dmods[:, s, 4] = L.pre_bwd(pre_m[s], dh)
            dxs1.append(dx + dxp)
        douts, dx_res = [], []
        for s in (0, 1):
            dx, dout, dmods[:, s, 2] = L.post_bwd(post_a[s], dxs1[s])
            douts.append(dout)
            dx_res.append(dx)
        dq, dkv = L.attention_bwd(c_attn, douts)
        dxs0 = []
        for s in (0, 1):
            dxp, dmods[:, s, 0], dmods[:, s, 1] = L.pre_bwd(pre_a[s], dq[s] + dkv[s])
            dxs0.append(dx_res[s] + dxp)
        return dxs0, dmods


class PixArtBlock:
    """Image self-attention, cross-attention to fixed text tokens, MLP.

    Only the image stream is modulated; the cross-attention branch is an
    unmodulated residual whose O-projection starts at zero.
    """

    def __init__(self, attn: L.AttnProj, cross: L.AttnProj, mlp: L.Mlp):
        self.attn = attn
        self.cross = cross
        self.mlp = mlp
        self.adaln = None

    def modules(self):
        return [self.attn, self.cross, self.mlp]

    def fwd(self, x, txt, mods, angles_img):
        m = mods[:, 0]
        h, c1 = L.pre_fwd(x, m[:, 0], m[:, 1])
        seg = [(h, self.attn, angles_img)]
        (a,), c2 = L.attention_fwd(seg, seg)
        x, c3 = L.post_fwd(x, a, m[:, 2])
        n, c4 = K.layernorm_fwd(x)
        (ca,), c5 = L.attention_fwd([(n, self.cross, None)], [(txt, self.cross, None)])
        x = x + ca
        h2, c6 = L.pre_fwd(x, m[:, 3], m[:, 4])
        y, c7 = self.mlp.fwd(h2)
        x, c8 = L.post_fwd(x, y, m[:, 5])
        return x, (c1, c2, c3, c4, c5, c6, c7, c8)

    def bwd(self, cache, dx):
        c1, c2, c3, c4, c5, c6, c7, c8 = cache
        b, d = dx.shape[0], dx.shape[-1]
        dm = np.zeros((b, 1, 6, d), dtype=dx.dtype)
        dx, dy, dm[:, 0, 5] = L.post_bwd(c8, dx)
        dh2 = self.mlp.bwd(c7, dy)
        dxp, dm[:, 0, 3], dm[:, 0, 4] = L.pre_bwd(c6, dh2)
        dx = dx + dxp
        (dn,), (dtxt,) = L.attention_bwd(c5, [dx])
        dx = dx + K.layernorm_bwd(c4, dn)
        dx, da, dm[:, 0, 2] = L.post_bwd(c3, dx)
        (dq,), (dkv,) = L.attention_bwd(c2, [da])
        dxp, dm[:, 0, 0], dm[:, 0, 1] = L.pre_bwd(c1, dq + dkv)
        return dx + dxp, dtxt, dm


class Model:
    """Diffusion transformer ``f(z_t, c, t)`` predicting ``z0 - eps``."""

    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config = config
        self.store = store
        n, d, h = config.layers, config.width, config.heads
        p, c, dt = config.patch, config.latent_channels, config.text_width
        self.patch_embed = L.Linear(store, "patch_embed", p * p * c, d)
        self.t_embed1 = L.Linear(store, "t_embed.fc1", config.time_freq_dim, d)
        self.t_embed2 = L.Linear(store, "t_embed.fc2", d, d)
        self.pooled_embed = L.Linear(store, "pooled_embed", dt, d)
        self.context_embed = L.Linear(store, "context_embed", dt, d)
        self.null_tokens = store.new("null.tokens", (config.text_len, dt), kind="embed", init="normal", std=1.0)
        self.null_pooled = store.new("null.pooled", (dt,), kind="embed", init="normal", std=1.0)

        v = config.variant
        self.shared_adaln = None
        self.blocks: list = []
        if v == "pixart":
            self.shared_adaln = L.AdaLN(store, "adaln", d, streams=1)
            for i in range(n):
                attn = L.AttnProj(store, f"layers.{i}.attn", d, h, "self_mha")
                cross = L.AttnProj(store, f"layers.{i}.cross", d, h, "cross_mha", zero_out=True)
                self.blocks.append(PixArtBlock(attn, cross, L.Mlp(store, f"layers.{i}.mlp", d)))
        elif v in ("mmdit", "mmdit_shared_adaln"):
            if v == "mmdit_shared_adaln":
                self.shared_adaln = L.AdaLN(store, "adaln", d, streams=2)
            for i in range(n):
                ada = L.AdaLN(store, f"layers.{i}.adaln", d, streams=2) if v == "mmdit" else None
                attn = [L.AttnProj(store, f"layers.{i}.attn_{s}", d, h) for s in ("txt", "img")]
                mlp = [L.Mlp(store, f"layers.{i}.mlp_{s}", d) for s in ("txt", "img")]
                self.blocks.append(JointBlock(attn, mlp, ada))
        else:
            self.shared_adaln = L.AdaLN(store, "adaln", d, streams=2)
            for i in range(n):
                attn = L.AttnProj(store, f"layers.{i}.attn", d, h)
                mlp = L.Mlp(store, f"layers.{i}.mlp", d)
                self.blocks.append(JointBlock([attn, attn], [mlp, mlp]))

        self.final_adaln = L.AdaLN(store, "final.adaln", d, streams=1, n_vectors=2, component="overhead")
        self.head = L.Linear(store, "final.head", d, p * p * c, zero=True)

    # -- parameter bookkeeping -------------------------------------------------

    def modules(self):
        mods = [self.patch_embed, self.t_embed1, self.t_embed2, self.pooled_embed, self.context_embed]
        if self.shared_adaln is not None:
            mods.append(self.shared_adaln)
        for blk in self.blocks:
            mods.extend(blk.modules())
        return mods + [self.final_adaln, self.head]

    def _prune(self):
        keep = {id(self.null_tokens), id(self.null_pooled)}
        for m in self.modules():
            keep.update(id(p) for p in m.params())
        self.store.drop_unreferenced(keep)

    @property
    def params(self):
        return self.store.params

    def zero_grad(self):
        self.store.zero_grad()

    def state_entries(self):
        return self.store.named_values()

    def load_state(self, entries):
        by_name = dict(entries)
        names = [p.name for p in self.params]
        if set(by_name) != set(names):
            missing = sorted(set(names) - set(by_name))
            extra = sorted(set(by_name) - set(names))
            raise ValueError(f"checkpoint mismatch; missing {missing[:5]} extra {extra[:5]}")
        for p in self.params:
            arr = by_name[p.name]
            if arr.shape != p.shape:
                raise DimensionError(f"{p.name}: checkpoint {arr.shape} vs model {p.shape}")
            p.value[...] = arr

    # -- forward / backward ----------------------------------------------------

    def __call__(self, z_t, cond: CondBundle, t):
        return self.forward_train(z_t, cond, t)[0]

    def forward_train(self, z_t, cond: CondBundle, t):
        cfg = self.config
        if self.store.shape_only:
            raise RuntimeError("shape-only model cannot run forward")
        dtype = self.store.dtype
        z_t = np.asarray(z_t, dtype=dtype)
        b, hh, ww, c = z_t.shape
        if c != cfg.latent_channels:
            raise DimensionError(f"latent channels {c} != {cfg.latent_channels}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        if cond.batch != b or cond.tokens.shape[1:] != (cfg.text_len, cfg.text_width):
            raise DimensionError(
                f"condition tokens {cond.tokens.shape} do not match batch {b} x ({cfg.text_len}, {cfg.text_width})"
            )
        p = cfg.patch
        img_in = patchify(z_t, p)
        x_img, c_pe = self.patch_embed.fwd(img_in)

        tf = timestep_features(t, cfg.time_freq_dim).astype(dtype)
        te1, c_t1 = self.t_embed1.fwd(tf)
        te1a, c_ts = K.silu_fwd(te1)
        te, c_t2 = self.t_embed2.fwd(te1a)

        null = cond.is_null
        tok = np.where(null[:, None, None], self.null_tokens.value[None], cond.tokens).astype(dtype)
        pooled = np.where(null[:, None], self.null_pooled.value[None], cond.pooled).astype(dtype)
        x_txt, c_ctx = self.context_embed.fwd(tok)
        pe, c_pool = self.pooled_embed.fwd(pooled)
        cvec = te + pe if cfg.use_pooled else te

        head_dim = cfg.width // cfg.heads
        angles = K.rope_angles(L.grid_positions(hh // p, ww // p), head_dim)

        shared = None
        if self.shared_adaln is not None:
            shared, c_shared = self.shared_adaln.fwd(cvec)
        block_caches = []
        if cfg.variant == "pixart":
            x = x_img
            for blk in self.blocks:
                x, bc = blk.fwd(x, x_txt, shared, angles)
                block_caches.append((bc, None))
            x_img = x
        else:
            xs = [x_txt, x_img]
            for blk in self.blocks:
                if blk.adaln is not None:
                    mods, ac = blk.adaln.fwd(cvec)
                else:
                    mods, ac = shared, None
                xs, bc = blk.fwd(xs, mods, angles)
                block_caches.append((bc, ac))
            x_img = xs[1]

        fm, c_fm = self.final_adaln.fwd(cvec)
        n, c_n = K.layernorm_fwd(x_img)
        hm, c_mod = K.modulate_fwd(n, fm[:, 0, 0], fm[:, 0, 1])
        out_tok, c_head = self.head.fwd(hm)
        pred = unpatchify(out_tok, p, hh, ww)
        cache = dict(
            shape=(b, hh, ww, c), c_pe=c_pe, c_t1=c_t1, c_ts=c_ts, c_t2=c_t2, null=null,
            c_ctx=c_ctx, c_pool=c_pool, shared=None if shared is None else c_shared,
            blocks=block_caches, c_fm=c_fm, c_n=c_n, c_mod=c_mod, c_head=c_head,
        )
        return pred, cache

    def backward(self, cache, dpred):
        """Accumulate parameter gradients for ``d loss / d pred``; returns d loss / d z_t."""
        cfg = self.config
        p = cfg.patch
        b, hh, ww, c = cache["shape"]
        dpred = np.asarray(dpred, dtype=self.store.dtype)
        dout_tok = patchify(dpred, p)
        dhm = self.head.bwd(cache["c_head"], dout_tok)
        dn, dshift, dscale = K.modulate_bwd(cache["c_mod"], dhm)
        dx_img = K.layernorm_bwd(cache["c_n"], dn)
        dfm = np.stack([dshift, dscale], axis=1)[:, None]
        dcvec = self.final_adaln.bwd(cache["c_fm"], dfm)

        dshared = None
        if self.shared_adaln is not None:
            streams = self.shared_adaln.streams
            dshared = np.zeros((b, streams, 6, cfg.width), dtype=dx_img.dtype)
        if cfg.variant == "pixart":
            dtxt = np.zeros((b, cfg.text_len, cfg.width), dtype=dx_img.dtype)
            dx = dx_img
            for blk, (bc, _) in zip(reversed(self.blocks), reversed(cache["blocks"])):
                dx, dt_i, dm = blk.bwd(bc, dx)
                dtxt += dt_i
                dshared += dm
            dx_img = dx
        else:
            dxs = [np.zeros((b, cfg.text_len, cfg.width), dtype=dx_img.dtype), dx_img]
            for blk, (bc, ac) in zip(reversed(self.blocks), reversed(cache["blocks"])):
                dxs, dm = blk.bwd(bc, dxs)
                if blk.adaln is not None:
                    dcvec = dcvec + blk.adaln.bwd(ac, dm)
                else:
                    dshared += dm
            dtxt, dx_img = dxs
        if dshared is not None:
            dcvec = dcvec + self.shared_adaln.bwd(cache["shared"], dshared)

        if cfg.use_pooled:
            dpooled = self.pooled_embed.bwd(cache["c_pool"], dcvec)
        else:
            dpooled = np.zeros_like(self.null_pooled.value)[None].repeat(b, 0)
        dtok = self.context_embed.bwd(cache["c_ctx"], dtxt)
        null = cache["null"]
        if null.any():
            self.null_tokens.accumulate(dtok[null].sum(axis=0))
            self.null_pooled.accumulate(dpooled[null].sum(axis=0))
        dte1a = self.t_embed2.bwd(cache["c_t2"], dcvec)
        self.t_embed1.bwd(cache["c_t1"], K.silu_bwd(cache["c_ts"], dte1a))
        dimg_in = self.patch_embed.bwd(cache["c_pe"], dx_img)
        return unpatchify(dimg_in, p, hh, ww)


def forward(model: Model, z_t, cond: CondBundle, t):
    return model(z_t, cond, t)


def apply_sharing(model: Model, mode: str) -> Model:
    """Alias layer-0 block weights into every layer of a single-stream model.

    ``full`` shares QKVO and MLP; ``attention`` shares QKVO only. Orphaned
    parameters leave the store, so the optimiser sees one slot per unique weight.
    """
    if mode not in ("full", "attention"):
        raise ConfigError(f"unknown sharing mode {mode!r}")
    if model.config.variant not in ("dit_air", "dit_air_lite_full", "dit_air_lite_attention"):
        raise ConfigError(f"sharing applies to single-stream variants, not {model.config.variant}")
    first = model.blocks[0]
    attn = first.attn[0]
    mlp = first.mlp[0]
    for blk in model.blocks:
        blk.attn = [attn, attn]
        if mode == "full":
            blk.mlp = [mlp, mlp]
    model._prune()
    return model


def build_model(config: ModelConfig, rng: Rng | None = None, dtype=np.float32, shape_only: bool = False) -> Model:
    store = ParamStore(rng=rng if rng is not None else Rng(0), dtype=dtype, shape_only=shape_only)
    mode = LITE_MODES.get(config.variant)
    model = Model(config, store)
    if mode is not None:
        apply_sharing(model, mode)
    return model


def unshared_clone(model: Model, dtype=None) -> Model:
    """A dit_air model whose per-layer weights are copies of ``model``'s (tied by value)."""
    cfg = replace(model.config, variant="dit_air")
    clone = build_model(cfg, Rng(0), dtype=dtype or model.store.dtype)
    src = {p.name: p for p in model.params}
    for p in clone.params:
        if p.name not in src:
            parts = p.name.split(".")
            p.value[...] = src[".".join(["layers", "0", *parts[2:]])].value
        else:
            p.value[...] = src[p.name].value
    return clone
