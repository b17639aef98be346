import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ditair import layers as L
from ditair.numerics import kernels as K
from ditair.numerics.errors import DimensionError
from ditair.numerics.gradcheck import grad_check
from ditair.numerics.params import ParamStore
from ditair.numerics.rng import Rng


def store(seed=0):
    return ParamStore(rng=Rng(seed), dtype=np.float64)


# -- AdaLN ----------------------------------------------------------------------


def test_adaln_zero_init_gives_zero_modulation():
    ada = L.AdaLN(store(), "ada", 8, streams=2)
    mods = L.adaln_modulate(Rng(1).normal((3, 8)), ada, stream=1)
    assert mods.shape == (6, 3, 8)
    assert not mods.any()


def test_adaln_zero_cond_zero_bias():
    ada = L.AdaLN(store(), "ada", 8, streams=1)
    ada.proj.w.value[...] = Rng(2).normal(ada.proj.w.shape)
    assert not L.adaln_modulate(np.zeros((2, 8)), ada, 0).any()


def test_adaln_matches_hand_product():
    d = 8
    ada = L.AdaLN(store(), "ada", d, streams=2)
    r = Rng(3)
    ada.proj.w.value[...] = r.normal(ada.proj.w.shape)
    ada.proj.b.value[...] = r.normal(ada.proj.b.shape)
    cond = r.normal((2, d))
    silu = cond / (1 + np.exp(-cond))
    full = silu @ ada.proj.w.value + ada.proj.b.value
    for stream in (0, 1):
        mods = L.adaln_modulate(cond, ada, stream)
        for v in range(6):
            lo = (stream * 6 + v) * d
            np.testing.assert_allclose(mods[v], full[:, lo : lo + d], atol=1e-12)


def test_adaln_bad_stream():
    ada = L.AdaLN(store(), "ada", 4, streams=1)
    with pytest.raises(IndexError):
        L.adaln_modulate(np.zeros((1, 4)), ada, 1)


def test_adaln_weight_count():
    for streams in (1, 2):
        ada = L.AdaLN(store(), "ada", 16, streams=streams)
        assert ada.proj.w.size == 6 * 16 * 16 * streams


# -- attention --------------------------------------------------------------------


def _proj(d=8, heads=2, seed=0):
    return L.AttnProj(store(seed), "attn", d, heads)


def test_mha_singleton_key_is_value_path():
    p = _proj()
    q = Rng(1).normal((1, 1, 8))
    kv = Rng(2).normal((1, 1, 8))
    out = L.mha(q, kv, p)
    v, _ = p.v.fwd(kv)
    ref, _ = p.o.fwd(v)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_mha_identical_keys_split_evenly():
    p = _proj()
    q = Rng(1).normal((1, 1, 8))
    kv = np.repeat(Rng(2).normal((1, 1, 8)), 2, axis=1)
    (_,), cache = L.attention_fwd([(q, p, None)], [(kv, p, None)])
    probs = cache[5][3]
    np.testing.assert_array_equal(probs, np.full_like(probs, 0.5))


def test_attention_probabilities_match_bruteforce():
    d, heads = 8, 2
    p = _proj(d, heads)
    x = Rng(4).normal((1, 3, d))
    (_,), cache = L.attention_fwd([(x, p, None)], [(x, p, None)])
    probs = cache[5][3]
    dh = d // heads
    q = x[0] @ p.q.w.value + p.q.b.value
    k = x[0] @ p.k.w.value + p.k.b.value
    for h in range(heads):
        qh, kh = q[:, h * dh : (h + 1) * dh], k[:, h * dh : (h + 1) * dh]
        qh = qh / np.sqrt(np.mean(qh**2, axis=-1, keepdims=True) + 1e-6)
        kh = kh / np.sqrt(np.mean(kh**2, axis=-1, keepdims=True) + 1e-6)
        for i in range(3):
            logits = [float(qh[i] @ kh[j]) / np.sqrt(dh) for j in range(3)]
            e = [np.exp(lg) for lg in logits]
            np.testing.assert_allclose(probs[0, h, i], [v / sum(e) for v in e], atol=1e-6)


def test_attention_width_and_head_errors():
    with pytest.raises(DimensionError):
        L.AttnProj(store(), "a", 10, 4)
    p = _proj()
    with pytest.raises(DimensionError):
        L.mha(np.zeros((1, 2, 6)), np.zeros((1, 2, 6)), p)


def test_qk_norm_unit_rms():
    p = _proj(16, 2)
    x = 5 * Rng(6).normal((2, 7, 16))
    q, _ = L._project_heads(p.q, p.q_norm, x, 2, None)
    k, _ = L._project_heads(p.k, p.k_norm, x, 2, None)
    for v in (q, k):
        rms = np.sqrt(np.mean(v**2, axis=-1))
        np.testing.assert_allclose(rms, 1.0, atol=1e-5)


def test_attention_causal_mask_blocks_future():
    p = _proj()
    x = Rng(1).normal((1, 4, 8))
    out1 = L.mha(x, x, p, mask=K.causal_mask(4, 4))
    x2 = x.copy()
    x2[0, 3] += 10.0
    out2 = L.mha(x2, x2, p, mask=K.causal_mask(4, 4))
    np.testing.assert_allclose(out1[0, :3], out2[0, :3], atol=1e-12)


def test_attention_backward_gradcheck():
    p_txt, p_img = _proj(8, 2, 1), _proj(8, 2, 2)
    r = Rng(3)
    for prm in p_txt.params() + p_img.params():
        prm.value[...] = r.normal(prm.shape) * 0.5 + (1.0 if prm.kind == "norm" else 0.0)
    xt, xi = r.normal((2, 2, 8)), r.normal((2, 4, 8))
    ang = K.rope_angles(L.grid_positions(2, 2), 4)
    dys = [r.normal((2, 2, 8)), r.normal((2, 4, 8))]

    def f():
        segs = [(xt, p_txt, None), (xi, p_img, ang)]
        outs, _ = L.attention_fwd(segs, segs)
        return float(sum(np.sum(o * d) for o, d in zip(outs, dys)))

    params = p_txt.params() + p_img.params()
    for prm in params:
        prm.zero_grad()
    segs = [(xt, p_txt, None), (xi, p_img, ang)]
    _, cache = L.attention_fwd(segs, segs)
    dq, dkv = L.attention_bwd(cache, dys)
    arrays = [xt, xi] + [prm.value for prm in params]
    grads = [dq[0] + dkv[0], dq[1] + dkv[1]] + [prm.grad for prm in params]
    assert grad_check(f, arrays, grads, eps=1e-5) < 1e-6


# -- rotary -----------------------------------------------------------------------


def test_rope_origin_is_identity():
    v = Rng(1).normal((1, 8))
    np.testing.assert_array_equal(L.rope2d_apply(v, np.array([[0, 0]])), v)


@given(st.integers(0, 31), st.integers(0, 31), st.integers(0, 2**32 - 1))
def test_rope_preserves_norm(row, col, seed):
    v = Rng(seed).normal((1, 16))
    out = L.rope2d_apply(v, np.array([[row, col]]))
    assert abs(np.linalg.norm(out) - np.linalg.norm(v)) < 1e-6 * max(1.0, np.linalg.norm(v))


@given(
    st.tuples(st.integers(0, 20), st.integers(0, 20)),
    st.tuples(st.integers(0, 20), st.integers(0, 20)),
    st.tuples(st.integers(-10, 10), st.integers(-10, 10)),
    st.integers(0, 2**32 - 1),
)
def test_rope_relative_invariance(p1, p2, delta, seed):
    r = Rng(seed)
    q, k = r.normal((1, 16)), r.normal((1, 16))
    p1, p2, dl = np.array([p1]), np.array([p2]), np.array([delta])
    lhs = float(np.sum(L.rope2d_apply(q, p1) * L.rope2d_apply(k, p2)))
    rhs = float(np.sum(L.rope2d_apply(q, p1 + dl) * L.rope2d_apply(k, p2 + dl)))
    assert abs(lhs - rhs) < 1e-5


def test_rope_odd_dimension():
    with pytest.raises(DimensionError):
        L.rope2d_apply(np.zeros((1, 7)), np.array([[1, 1]]))


def test_text_logits_unchanged_by_image_shift():
    # Text tokens use the identity rotation; shifting the image grid leaves text-text logits alone.
    p = _proj(16, 2)
    x = Rng(2).normal((1, 3, 16))
    q, _ = L._project_heads(p.q, p.q_norm, x, 2, None)
    k, _ = L._project_heads(p.k, p.k_norm, x, 2, None)
    ident = L.RopeTable.identity(3, 8).angles
    qr, _ = K.rope_fwd(q, ident)
    kr, _ = K.rope_fwd(k, ident)
    np.testing.assert_array_equal(qr @ np.swapaxes(kr, -1, -2), q @ np.swapaxes(k, -1, -2))


# -- sandwich / mlp ----------------------------------------------------------------


def _mlp(d=8, seed=0):
    return L.Mlp(store(seed), "mlp", d)


def test_sandwich_zero_gate_identity():
    m = _mlp()
    x = Rng(1).normal((2, 3, 8))
    r = Rng(2)
    out = L.sandwich_block(m.fwd, x, r.normal((2, 8)), r.normal((2, 8)), np.zeros((2, 8)))
    np.testing.assert_array_equal(out, x)


def test_post_norm_unit_rms():
    s = 3 + 4 * Rng(1).normal((2, 5, 16))
    p, _ = K.layernorm_fwd(s)
    np.testing.assert_allclose(np.sqrt(np.mean(p**2, axis=-1)), 1.0, atol=1e-5)
    np.testing.assert_allclose(p.mean(axis=-1), 0.0, atol=1e-12)


def test_sandwich_matches_straight_line_reference():
    d = 16
    m = _mlp(d, 3)
    r = Rng(4)
    for prm in m.params():
        prm.value[...] = r.normal(prm.shape) * 0.3
    x = r.normal((2, 3, d))
    shift, scale, gate = r.normal((2, d)), r.normal((2, d)), r.normal((2, d))

    def ln(v):
        c = v - v.mean(-1, keepdims=True)
        return c / np.sqrt((c**2).mean(-1, keepdims=True) + 1e-6)

    h = ln(x) * (1 + scale[:, None]) + shift[:, None]
    a = h @ m.up.w.value + m.up.b.value
    a = 0.5 * a * (1 + np.tanh(np.sqrt(2 / np.pi) * (a + 0.044715 * a**3)))
    s = a @ m.down.w.value + m.down.b.value
    ref = x + gate[:, None] * ln(s)
    np.testing.assert_allclose(L.sandwich_block(m.fwd, x, shift, scale, gate), ref, atol=1e-12)


def test_mlp_zero_input_bias_path():
    m = _mlp(4, 1)
    m.up.b.value[...] = Rng(2).normal(16)
    m.down.b.value[...] = Rng(3).normal(4)
    out = L.mlp(np.zeros((1, 1, 4)), m)
    b = m.up.b.value
    g = 0.5 * b * (1 + np.tanh(np.sqrt(2 / np.pi) * (b + 0.044715 * b**3)))
    np.testing.assert_allclose(out[0, 0], g @ m.down.w.value + m.down.b.value, atol=1e-12)


def test_mlp_d4_hand_check():
    m = _mlp(4, 5)
    x = Rng(6).normal((1, 2, 4))
    out = L.mlp(x, m)
    for i in range(2):
        hid = [sum(x[0, i, a] * m.up.w.value[a, j] for a in range(4)) + m.up.b.value[j] for j in range(16)]
        act = [0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v**3))) for v in hid]
        ref = [sum(act[j] * m.down.w.value[j, o] for j in range(16)) + m.down.b.value[o] for o in range(4)]
        np.testing.assert_allclose(out[0, i], ref, atol=1e-12)


def test_mlp_linear_in_down_weights():
    m = _mlp(4, 7)
    m.down.b.value[...] = 0
    x = Rng(8).normal((1, 3, 4))
    base = L.mlp(x, m)
    m.down.w.value *= 2.5
    np.testing.assert_allclose(L.mlp(x, m), 2.5 * base, atol=1e-12)


def test_block_weight_counts():
    st_ = store()
    a = L.AttnProj(st_, "a", 16, 4)
    m = L.Mlp(st_, "m", 16)
    w = lambda mods: sum(p.size for p in mods.params() if p.kind == "weight")
    assert w(a) == 4 * 16 * 16
    assert w(m) == 8 * 16 * 16


def test_linear_shared_use_sites_accumulate():
    lin = L.Linear(store(), "lin", 3, 2)
    lin.w.zero_grad()
    lin.b.zero_grad()
    x1, x2 = Rng(1).normal((4, 3)), Rng(2).normal((4, 3))
    d1, d2 = Rng(3).normal((4, 2)), Rng(4).normal((4, 2))
    lin.bwd(x1, d1)
    lin.bwd(x2, d2)
    np.testing.assert_allclose(lin.w.grad, x1.T @ d1 + x2.T @ d2, atol=1e-12)
