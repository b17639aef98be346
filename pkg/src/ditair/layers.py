"""Transformer building blocks with explicit forward/backward.

Modules hold ``Param`` references only; activations travel in caches returned
by ``fwd`` so one module object can be applied at several sites (layer
sharing) and its gradients accumulate across all of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import kernels as K
from .numerics.errors import DimensionError
from .numerics.params import Param, ParamStore


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, component="overhead", bias=True, zero=False):
        init = "zeros" if zero else "normal"
        self.w = store.new(f"{name}.weight", (d_in, d_out), component, "weight", init=init)
        self.b = store.new(f"{name}.bias", (d_out,), component, "bias", init="zeros") if bias else None

    def params(self) -> list[Param]:
        return [self.w] if self.b is None else [self.w, self.b]

    def fwd(self, x):
        return K.linear_fwd(x, self.w.value, None if self.b is None else self.b.value)

    def bwd(self, x, dy):
        dx, dw, db = K.linear_bwd(x, dy, self.w.value, self.b is not None)
        self.w.accumulate(dw)
        if self.b is not None:
            self.b.accumulate(db)
        return dx


class Mlp:
    """``GELU(x W_up) W_down`` with a 4x hidden expansion."""

    def __init__(self, store: ParamStore, name: str, d: int, component="mlp"):
        self.up = Linear(store, f"{name}.up", d, 4 * d, component)
        self.down = Linear(store, f"{name}.down", 4 * d, d, component)

    def params(self):
        return self.up.params() + self.down.params()

    def fwd(self, x):
        h, c1 = self.up.fwd(x)
        a, c2 = K.gelu_fwd(h)
        y, c3 = self.down.fwd(a)
        return y, (c1, c2, c3)

    def bwd(self, cache, dy):
        c1, c2, c3 = cache
        da = self.down.bwd(c3, dy)
        dh = K.gelu_bwd(c2, da)
        return self.up.bwd(c1, dh)


def mlp(x, params: Mlp):
    return params.fwd(x)[0]


class AttnProj:
    """QKVO projections of one stream plus per-head QK RMS-norm scales."""

    def __init__(self, store: ParamStore, name: str, d: int, n_heads: int, component="self_mha", zero_out=False):
        if d % n_heads:
            raise DimensionError(f"width {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.q = Linear(store, f"{name}.q", d, d, component)
        self.k = Linear(store, f"{name}.k", d, d, component)
        self.v = Linear(store, f"{name}.v", d, d, component)
        self.o = Linear(store, f"{name}.o", d, d, component, zero=zero_out)
        self.q_norm = store.new(f"{name}.q_norm", (self.head_dim,), component, "norm", init="ones")
        self.k_norm = store.new(f"{name}.k_norm", (self.head_dim,), component, "norm", init="ones")

    def params(self):
        return self.q.params() + self.k.params() + self.v.params() + self.o.params() + [self.q_norm, self.k_norm]


@dataclass
class RopeTable:
    """Per-token rotation angles (L, head_dim / 2)."""

    angles: np.ndarray

    @classmethod
    def for_grid(cls, rows: int, cols: int, head_dim: int, base: float = 10000.0) -> "RopeTable":
        return cls(K.rope_angles(grid_positions(rows, cols), head_dim, base))

    @classmethod
    def identity(cls, length: int, head_dim: int) -> "RopeTable":
        return cls(np.zeros((length, head_dim // 2)))


def grid_positions(rows: int, cols: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([r.reshape(-1), c.reshape(-1)], axis=-1)


def rope2d_apply(vectors, positions, base: float = 10000.0):
    """Rotate (..., L, D) vectors by their (row, col) positions (L, 2)."""
    angles = K.rope_angles(positions, vectors.shape[-1], base)
    return K.rope_fwd(vectors, angles)[0]


def _split_heads(x, n_heads):
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, h * dh)


def _project_heads(lin: Linear, g: Param, x, n_heads, angles):
    y, c_lin = lin.fwd(x)
    yh = _split_heads(y, n_heads)
    yn, c_norm = K.rmsnorm_fwd(yh, g.value)
    c_rope = None
    if angles is not None:
        yn, c_rope = K.rope_fwd(yn, angles)
    return yn, (c_lin, c_norm, c_rope)


def _project_heads_bwd(lin: Linear, g: Param, cache, dy):
    c_lin, c_norm, c_rope = cache
    if c_rope is not None:
        dy = K.rope_bwd(c_rope, dy)
    dyh, dg = K.rmsnorm_bwd(c_norm, dy)
    g.accumulate(dg)
    return lin.bwd(c_lin, _merge_heads(dyh))


def attention_fwd(q_segs, kv_segs, mask=None):
    """Multi-head attention over concatenated segments.

    ``q_segs`` and ``kv_segs`` are lists of ``(tokens (B, L_s, d), AttnProj,
    angles | None)``. Queries of every query segment attend jointly over the
    keys of every key segment; each query segment's output goes through its
    own O-projection. Returns ``(outputs, cache)``.
    """
    n_heads = q_segs[0][1].n_heads
    for x, proj, _ in list(q_segs) + list(kv_segs):
        if x.shape[-1] != proj.d:
            raise DimensionError(f"token width {x.shape[-1]} != attention width {proj.d}")
    qs, q_caches = [], []
    for x, proj, ang in q_segs:
        q, c = _project_heads(proj.q, proj.q_norm, x, n_heads, ang)
        qs.append(q)
        q_caches.append(c)
    ks, vs, k_caches, v_caches = [], [], [], []
    for x, proj, ang in kv_segs:
        k, ck = _project_heads(proj.k, proj.k_norm, x, n_heads, ang)
        v, cv = proj.v.fwd(x)
        ks.append(k)
        vs.append(_split_heads(v, n_heads))
        k_caches.append(ck)
        v_caches.append(cv)
    q_all = np.concatenate(qs, axis=2)
    k_all = np.concatenate(ks, axis=2)
    v_all = np.concatenate(vs, axis=2)
    o_all, c_sdpa = K.sdpa_fwd(q_all, k_all, v_all, mask)
    o_merged = _merge_heads(o_all)
    q_lens = [x.shape[1] for x, _, _ in q_segs]
    bounds = np.cumsum([0] + q_lens)
    outs, o_caches = [], []
    for i, (_, proj, _) in enumerate(q_segs):
        y, c = proj.o.fwd(o_merged[:, bounds[i] : bounds[i + 1]])
        outs.append(y)
        o_caches.append(c)
    kv_lens = [x.shape[1] for x, _, _ in kv_segs]
    cache = (q_segs, kv_segs, q_caches, k_caches, v_caches, c_sdpa, o_caches, q_lens, kv_lens)
    return outs, cache


def attention_bwd(cache, douts):
    """Returns ``(dq_tokens, dkv_tokens)`` lists aligned with the segments."""
    q_segs, kv_segs, q_caches, k_caches, v_caches, c_sdpa, o_caches, q_lens, kv_lens = cache
    n_heads = q_segs[0][1].n_heads
    do_merged = np.concatenate(
        [proj.o.bwd(c, dy) for (_, proj, _), c, dy in zip(q_segs, o_caches, douts)], axis=1
    )
    dq_all, dk_all, dv_all = K.sdpa_bwd(c_sdpa, _split_heads(do_merged, n_heads))
    qb = np.cumsum([0] + q_lens)
    kb = np.cumsum([0] + kv_lens)
    dxq = []
    for i, (_, proj, _) in enumerate(q_segs):
        dq = dq_all[:, :, qb[i] : qb[i + 1]]
        dxq.append(_project_heads_bwd(proj.q, proj.q_norm, q_caches[i], dq))
    dxkv = []
    for i, (_, proj, _) in enumerate(kv_segs):
        dk = dk_all[:, :, kb[i] : kb[i + 1]]
        dv = dv_all[:, :, kb[i] : kb[i + 1]]
        dx = _project_heads_bwd(proj.k, proj.k_norm, k_caches[i], dk)
        dx = dx + proj.v.bwd(v_caches[i], _merge_heads(dv))
        dxkv.append(dx)
    return dxq, dxkv


def mha(q_tokens, kv_tokens, params: AttnProj, rope: RopeTable | None = None, mask=None):
    """Single-stream attention. Self-attention when ``kv_tokens is q_tokens``;
    the rotary table is applied to queries and keys of self-attention only."""
    ang = None if rope is None else rope.angles
    if kv_tokens is q_tokens:
        (out,), _ = attention_fwd([(q_tokens, params, ang)], [(q_tokens, params, ang)], mask)
    else:
        (out,), _ = attention_fwd([(q_tokens, params, None)], [(kv_tokens, params, None)], mask)
    return out


class AdaLN:
    """Maps the conditioning vector to 6 modulation vectors per stream.

    Order per stream: attention (shift, scale, gate), MLP (shift, scale, gate).
    Zero-initialised, so a fresh model's blocks are identities.
    """

    def __init__(self, store: ParamStore, name: str, d: int, streams: int, n_vectors: int = 6, component="adaln"):
        self.d = d
        self.streams = streams
        self.n_vectors = n_vectors
        self.proj = Linear(store, name, d, n_vectors * d * streams, component, zero=True)

    def params(self):
        return self.proj.params()

    def fwd(self, cond):
        h, c1 = K.silu_fwd(cond)
        y, c2 = self.proj.fwd(h)
        return y.reshape(cond.shape[0], self.streams, self.n_vectors, self.d), (c1, c2)

    def bwd(self, cache, dmod):
        c1, c2 = cache
        dh = self.proj.bwd(c2, dmod.reshape(dmod.shape[0], -1))
        return K.silu_bwd(c1, dh)


def adaln_modulate(cond, params: AdaLN, stream: int):
    """(shift, scale, gate) pairs of one stream: returns an array (6, B, d)."""
    if not 0 <= stream < params.streams:
        raise IndexError(f"stream {stream} out of range for {params.streams} streams")
    mods, _ = params.fwd(cond)
    return np.moveaxis(mods[:, stream], 1, 0)


# Sandwich normalisation split around the sublayer so joint attention can mix
# several streams between the pre and post halves.


def pre_fwd(x, shift, scale):
    n, c1 = K.layernorm_fwd(x)
    h, c2 = K.modulate_fwd(n, shift, scale)
    return h, (c1, c2)


def pre_bwd(cache, dh):
    c1, c2 = cache
    dn, dshift, dscale = K.modulate_bwd(c2, dh)
    return K.layernorm_bwd(c1, dn), dshift, dscale


def post_fwd(x, s, gate):
    p, c1 = K.layernorm_fwd(s)
    out, c2 = K.gate_fwd(x, p, gate)
    return out, (c1, c2)


def post_bwd(cache, dout):
    c1, c2 = cache
    dx, dp, dgate = K.gate_bwd(c2, dout)
    return dx, K.layernorm_bwd(c1, dp), dgate


def sandwich_block(sublayer, x, shift, scale, gate):
    """``x + gate * post_norm(sublayer(modulated_pre_norm(x)))``.

    ``sublayer`` maps tokens to ``(out, cache)``.
    """
    h, _ = pre_fwd(x, shift, scale)
    s, _ = sublayer(h)
    return post_fwd(x, s, gate)[0]
