"""Dense kernels with hand-derived backward passes.

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes
``(cache, dout)`` and returns input gradients (and parameter gradients where
the kernel owns parameters). Arrays follow numpy broadcasting; the trailing
axis is the feature axis unless stated otherwise.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError

GELU_C = math.sqrt(2.0 / math.pi)
NORM_EPS = 1e-6


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray, ordered: bool = False) -> np.ndarray:
    """``a @ b`` for 2-D operands.

    ``ordered=True`` accumulates over the inner axis in ascending order with
    separately rounded multiply and add, which is bit-identical to the naive
    triple loop. The default defers to BLAS, which is deterministic per
    platform and thread count but uses its own blocking and FMA.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dims differ: {a.shape} x {b.shape}")
    if not ordered:
        return a @ b
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out = out + a[:, k, None] * b[None, k, :]
    return out


# ---------------------------------------------------------------------------
# linear / elementwise
# ---------------------------------------------------------------------------


def linear_fwd(x, w, b=None):
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x @ w
    if b is not None:
        y = y + b
    return y, x


def linear_bwd(x, dy, w, has_bias=True):
    """Returns ``(dx, dw, db)``; ``db`` is None without bias."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    dx = dy @ w.T
    return dx, dw, db


def bias_add_fwd(x, b):
    return x + b, None


def bias_add_bwd(dy, feature_dim: int):
    return dy, dy.reshape(-1, feature_dim).sum(axis=0)


def gelu_fwd(x):
    x2 = x * x
    u = GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(u)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_bwd(cache, dy):
    x, th = cache
    du = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_bwd(cache, dy):
    x, s = cache
    return dy * (s + x * s * (1.0 - s))


def modulate_fwd(x, shift, scale):
    """``x * (1 + scale) + shift`` with per-sample ``shift``/``scale`` of shape (B, d)
    broadcast over the token axis of ``x`` (B, L, d)."""
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :], (x, scale)


def modulate_bwd(cache, dy):
    x, scale = cache
    dx = dy * (1.0 + scale[:, None, :])
    dscale = (dy * x).sum(axis=1)
    dshift = dy.sum(axis=1)
    return dx, dshift, dscale


def gate_fwd(x, h, gate):
    """Residual ``x + gate * h`` with per-sample gate (B, d)."""
    return x + gate[:, None, :] * h, (h, gate)


def gate_bwd(cache, dy):
    h, gate = cache
    return dy, dy * gate[:, None, :], (dy * h).sum(axis=1)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def layernorm_fwd(x, eps: float = NORM_EPS):
    """Affine-free LayerNorm over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat, (xhat, inv)


def layernorm_bwd(cache, dy):
    xhat, inv = cache
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * xhat).mean(axis=-1, keepdims=True)
    return inv * (dy - m1 - xhat * m2)


def rmsnorm_fwd(x, g, eps: float = NORM_EPS):
    """RMS normalisation over the last axis with a learned per-feature scale ``g``."""
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x * inv
    return xhat * g, (xhat, inv, g)


def rmsnorm_bwd(cache, dy):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_bwd(p, dy):
    return p * (dy - (dy * p).sum(axis=-1, keepdims=True))


def causal_mask(lq: int, lk: int, dtype=np.float64) -> np.ndarray:
    m = np.zeros((lq, lk), dtype=dtype)
    m[np.triu_indices(lq, k=1 + lk - lq)] = -np.inf
    return m


def sdpa_fwd(q, k, v, mask=None):
    """Scaled dot-product attention on (..., L, Dh) operands."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"sdpa: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        s = s + mask
    p, _ = softmax_fwd(s)
    return p @ v, (q, k, v, p, scale)


def sdpa_bwd(cache, do):
    q, k, v, p, scale = cache
    dv = np.swapaxes(p, -1, -2) @ do
    dp = do @ np.swapaxes(v, -1, -2)
    ds = softmax_bwd(p, dp) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Rotation angles (L, head_dim // 2) for 2-D grid positions (L, 2).

    The first half of the rotary pairs turn with the row coordinate, the second
    half with the column coordinate. Position (0, 0) is the identity rotation, which
    is what text tokens receive.
    """
    if head_dim % 2:
        raise DimensionError(f"rotary dimension must be even, got {head_dim}")
    if head_dim % 4:
        raise DimensionError(f"2-D rotary needs head_dim divisible by 4, got {head_dim}")
    quarter = head_dim // 4
    inv_freq = base ** (-np.arange(quarter, dtype=np.float64) / quarter)
    pos = np.asarray(positions, dtype=np.float64)
    rows = pos[:, 0:1] * inv_freq
    cols = pos[:, 1:2] * inv_freq
    return np.concatenate([rows, cols], axis=-1)


def rope_fwd(x, angles):
    """Rotate consecutive feature pairs of ``x`` (..., L, D) by ``angles`` (L, D/2)."""
    if x.shape[-1] % 2:
        raise DimensionError(f"rotary dimension must be even, got {x.shape[-1]}")
    if angles.shape != (x.shape[-2], x.shape[-1] // 2):
        raise DimensionError(f"angles {angles.shape} do not match vectors {x.shape}")
    cos = np.cos(angles).astype(x.dtype, copy=False)
    sin = np.sin(angles).astype(x.dtype, copy=False)
    return _rotate(x, cos, sin), (cos, sin)


def rope_bwd(cache, dy):
    cos, sin = cache
    return _rotate(dy, cos, -sin)


def _rotate(x, cos, sin):
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


# ---------------------------------------------------------------------------
# lookup / loss
# ---------------------------------------------------------------------------


def embedding_fwd(table, ids):
    return table[ids], (ids, table.shape)


def embedding_bwd(cache, dy):
    ids, shape = cache
    dtable = np.zeros(shape, dtype=dy.dtype)
    np.add.at(dtable, ids.reshape(-1), dy.reshape(-1, shape[1]))
    return dtable


def mse_fwd(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    r = pred - target
    return float(np.mean(r * r)), r


def mse_bwd(r):
    return 2.0 * r / r.size


# ---------------------------------------------------------------------------
# convolution (NHWC) for the toy VAE
# ---------------------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(b, ho, wo, kh * kw * c), xp.shape


def conv2d_fwd(x, w, b, stride: int = 1, pad: int = 1):
    """NHWC convolution; ``w`` is (kh, kw, c_in, c_out)."""
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input channels {x.shape[-1]} != {cin}")
    cols, padded_shape = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(-1, cout) + b
    return y, (cols, padded_shape, w.shape, stride, pad)


def conv2d_bwd(cache, dy, w):
    """Returns ``(dx, dw, db)``."""
    cols, padded_shape, wshape, stride, pad = cache
    kh, kw, cin, cout = wshape
    b, ho, wo, _ = dy.shape
    dy2 = dy.reshape(-1, cout)
    dw = (cols.reshape(-1, cols.shape[-1]).T @ dy2).reshape(wshape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(-1, cout).T).reshape(b, ho, wo, kh, kw, cin)
    dxp = np.zeros(padded_shape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    h, wd = padded_shape[1] - 2 * pad, padded_shape[2] - 2 * pad
    return dxp[:, pad : pad + h, pad : pad + wd, :], dw, db


def upsample2_fwd(x):
    return x.repeat(2, axis=1).repeat(2, axis=2), None


def upsample2_bwd(dy):
    b, h, w, c = dy.shape
    return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
