import numpy as np
import pytest

from ditair.arch import ModelConfig, build_model
from ditair.conditioning import CondBundle, null_condition
from ditair.flow import gaussian_oracle
from ditair.numerics.errors import DimensionError, NumericError
from ditair.numerics.rng import Rng
from ditair.sampler import SamplerConfig, cfg_combine, generate, heun_integrate, time_grid


def test_cfg_identities():
    r = Rng(0)
    c, u = r.normal((3, 4)), r.normal((3, 4))
    np.testing.assert_array_equal(cfg_combine(c, u, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(c, u, 0.0), u)
    assert cfg_combine(np.float64(1.0), np.float64(0.0), 7.5) == 7.5
    np.testing.assert_allclose(cfg_combine(c, u, 3.0), u + 3 * (c - u))
    with pytest.raises(DimensionError):
        cfg_combine(c, u[:2], 2.0)


def test_config_validation():
    assert SamplerConfig().steps == 50 and SamplerConfig().guidance == 7.5 and SamplerConfig().churn == 0
    for kw in ({"steps": 0}, {"guidance": -1.0}, {"churn": -0.1}):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


def test_grid():
    g = time_grid(4)
    np.testing.assert_array_equal(g, [1, 0.75, 0.5, 0.25, 0])


@pytest.mark.parametrize("final_euler", [True, False])
def test_exponential_decay(final_euler):
    # dz/dt = z run from t=1 back to t=0 decays by e^-1
    z = heun_integrate(lambda z, t: -z, np.array([1.0]), SamplerConfig(steps=50, final_euler=final_euler))
    assert abs(z[0] - np.exp(-1)) < 1e-4


def test_constant_field_one_step():
    c = np.array([0.3, -2.0])
    z = heun_integrate(lambda z, t: c, np.array([1.0, 1.0]), SamplerConfig(steps=1))
    np.testing.assert_array_equal(z, np.array([1.0, 1.0]) + c)


def test_time_linear_field_exact():
    # prediction a + b t: Heun's trapezoid is exact for integrands linear in t
    f = lambda z, t: np.full_like(z, 0.5 + 2.0 * t)
    z = heun_integrate(f, np.zeros(1), SamplerConfig(steps=3, final_euler=False))
    assert z[0] == pytest.approx(0.5 + 1.0, abs=1e-14)


def _oracle_error(steps, final_euler, mu=0.5, sigma=0.6):
    eps = Rng(1).normal((2000,))
    z = heun_integrate(lambda z, t: gaussian_oracle(z, t, mu, sigma), eps, SamplerConfig(steps=steps, final_euler=final_euler))
    return np.max(np.abs(z - (mu + sigma * eps)))


@pytest.mark.parametrize("final_euler", [True, False])
def test_second_order_convergence(final_euler):
    e = [_oracle_error(n, final_euler) for n in (25, 50, 100)]
    assert 3.5 <= e[0] / e[1] <= 4.5
    assert 3.5 <= e[1] / e[2] <= 4.5


def test_oracle_transport():
    mu, sigma, n = -0.3, 1.7, 10_000
    z = heun_integrate(lambda z, t: gaussian_oracle(z, t, mu, sigma), Rng(2).normal((n,)), SamplerConfig(steps=50))
    assert abs(z.mean() - mu) < 3 * sigma / np.sqrt(n)
    assert z.var() == pytest.approx(sigma**2, rel=0.05)


def test_nonfinite_reports_step():
    def field(z, t):
        return np.full_like(z, np.inf) if t < 0.6 else z

    with pytest.raises(NumericError, match="step 2"):
        heun_integrate(field, np.ones(2), SamplerConfig(steps=5))


def test_churn_changes_and_is_seeded():
    f = lambda z, t: gaussian_oracle(z, t, 0.0, 1.0)
    z0 = Rng(3).normal((64,))
    cfg = SamplerConfig(steps=10, churn=0.5)
    a = heun_integrate(f, z0, cfg, Rng(4))
    b = heun_integrate(f, z0, cfg, Rng(4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, heun_integrate(f, z0, SamplerConfig(steps=10)))


def test_churn_keeps_marginal():
    mu, sigma = 0.2, 0.5
    f = lambda z, t: gaussian_oracle(z, t, mu, sigma)
    z = heun_integrate(f, Rng(5).normal((20_000,)), SamplerConfig(steps=50, churn=0.3), Rng(6))
    assert abs(z.mean() - mu) < 0.02
    assert z.std() == pytest.approx(sigma, rel=0.05)


def _model():
    cfg = ModelConfig(variant="dit_air", size=None, n_layers=2, d=16, text_dim=8, latent_size=4)
    m = build_model(cfg, Rng(1))
    r = Rng(2)
    for p in m.params:
        p.value[...] = 0.2 * r.normal(p.shape)
    return m, cfg


def _cond(cfg, b=2):
    r = Rng(7)
    return CondBundle(r.normal((b, cfg.text_len, 8)).astype(np.float32), r.normal((b, 8)).astype(np.float32), np.zeros(b, bool))


def test_generate_deterministic():
    m, cfg = _model()
    sc = SamplerConfig(steps=4, guidance=3.0)
    a = generate(m, _cond(cfg), sc, Rng(11))
    b = generate(m, _cond(cfg), sc, Rng(11))
    assert a.shape == (2, 4, 4, 4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, generate(m, _cond(cfg), sc, Rng(12)))


def test_zero_guidance_is_unconditional():
    m, cfg = _model()
    uncond = generate(m, null_condition(cfg.text_len, 8, 2), SamplerConfig(steps=4, guidance=1.0), Rng(3))
    w0 = generate(m, _cond(cfg), SamplerConfig(steps=4, guidance=0.0), Rng(3))
    np.testing.assert_array_equal(w0, uncond)


def test_guidance_matters():
    m, cfg = _model()
    a = generate(m, _cond(cfg), SamplerConfig(steps=4, guidance=1.0), Rng(3))
    b = generate(m, _cond(cfg), SamplerConfig(steps=4, guidance=7.5), Rng(3))
    assert not np.allclose(a, b)
