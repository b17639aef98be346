import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ditair.numerics.rng import Rng
from ditair.scalinglab import (
    CSV_COLUMNS, GaussianTask, TaskConfig, config_hash, emit_report, fit_by_variant, fit_power_law,
    grid_task_config, read_records_csv, render_svg, run_grid, toy_grid, train_run, worker_count,
    write_records_csv,
)

SMALL = TaskConfig(latent_size=4, batch=16, n_val=128, log_every=5)


def test_exact_recovery():
    pts = [(s, 2.0 * s**-0.3) for s in (1e6, 1e7, 1e8)]
    f = fit_power_law(pts)
    assert f.a == pytest.approx(2.0, abs=1e-9)
    assert f.b == pytest.approx(-0.3, abs=1e-9)
    assert f.rms < 1e-12


def test_degenerate_inputs():
    with pytest.raises(ValueError):
        fit_power_law([(1e6, 1.0)])
    with pytest.raises(ValueError):
        fit_power_law([(1e6, 1.0), (1e6, 2.0)])
    with pytest.raises(ValueError):
        fit_power_law([(0.0, 1.0), (1e6, 2.0)])
    with pytest.raises(ValueError):
        fit_power_law([(1e5, -1.0), (1e6, 2.0)])


def test_noisy_recovery():
    r = Rng(0)
    s = np.array([1e6, 3e6, 1e7, 3e7, 1e8])
    for _ in range(100):
        loss = 2.0 * s**-0.3 * (1 + 0.01 * (2 * r.uniform((5,)) - 1))
        assert abs(fit_power_law(np.column_stack([s, loss])).b + 0.3) <= 0.02


@given(
    st.floats(0.1, 10), st.floats(-1, 1), st.floats(1e-3, 1e3),
    st.lists(st.floats(1e3, 1e9), min_size=3, max_size=6, unique=True),
)
def test_scale_equivariance(a, b, k, sizes):
    s = np.array(sizes)
    if np.ptp(np.log(s)) < 1e-3:
        return
    loss = a * s**b * np.exp(0.05 * np.sin(np.arange(len(s))))
    f0 = fit_power_law(np.column_stack([s, loss]))
    f1 = fit_power_law(np.column_stack([k * s, loss]))
    assert f1.b == pytest.approx(f0.b, abs=1e-9)
    assert f1.a == pytest.approx(f0.a * k ** (-f0.b), rel=1e-9)


def test_zero_steps_is_zero_predictor():
    task = GaussianTask(SMALL)
    rec = train_run(task.model_config("dit_air", 2, 16), SMALL, 0, Rng(1))
    target = task.val.target.astype(np.float64)
    assert rec.val_loss == pytest.approx(float(np.mean(target**2)), rel=1e-6)
    mu = task.means[task.val_labels]
    expected = float(np.mean(mu.astype(np.float64) ** 2)) + SMALL.sigma**2 + 1
    se = np.std(target**2) / math.sqrt(target.size)
    assert abs(rec.val_loss - expected) < 4 * se


def test_oracle_below_zero_predictor():
    task = GaussianTask(SMALL)
    assert task.oracle_val_loss() == pytest.approx(task.optimum(), rel=0.05)
    assert task.optimum() == pytest.approx(0.81108, abs=1e-4)


def test_training_improves_and_is_deterministic():
    task = GaussianTask(SMALL)
    mc = task.model_config("dit_air", 2, 16)
    a = train_run(mc, SMALL, 30, Rng(2))
    b = train_run(mc, SMALL, 30, Rng(2))
    assert a == b
    assert a.val_loss < train_run(mc, SMALL, 0, Rng(2)).val_loss
    assert [s for s, _ in a.train_loss] == [5, 10, 15, 20, 25, 30]
    assert a.params > 0


def test_val_loss_deterministic_given_model():
    task = GaussianTask(SMALL)
    rec, model = train_run(task.model_config("mmdit", 2, 16), SMALL, 5, Rng(3), return_model=True)
    assert task.val_loss(model) == task.val_loss(model) == rec.val_loss
    assert task.val_loss(model, chunk=7) == pytest.approx(rec.val_loss, rel=1e-12)


def test_config_hash_sensitivity():
    task = GaussianTask(SMALL)
    mc = task.model_config("dit_air", 2, 16)
    h = config_hash(mc, SMALL, 10, 0)
    assert len(h) == 16 and h == config_hash(mc, SMALL, 10, 0)
    assert h != config_hash(mc, SMALL, 11, 0) != config_hash(mc, SMALL, 10, 1)


def test_grid_shapes():
    configs = toy_grid(grid_task_config())
    assert len(configs) == 12
    assert {(c.layers, c.width) for c in configs} == {(n, 32 * n) for n in (2, 4, 6, 8)}


def test_run_grid_order_and_determinism(monkeypatch):
    monkeypatch.setenv("DITAIR_THREADS", "1")
    configs = toy_grid(SMALL, families=("pixart", "dit_air"), layers=(2,))
    a = run_grid(configs, SMALL, 3, seed=4)
    b = run_grid(list(reversed(configs)), SMALL, 3, seed=4)
    assert a == b
    assert [r.config_hash for r in a] == sorted(r.config_hash for r in a)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("DITAIR_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2 and worker_count(0) == 1
    monkeypatch.delenv("DITAIR_THREADS")
    assert worker_count(1) == 1


def _rows():
    out = []
    for v, a, b in (("dit_air", 2.0, -0.1), ("mmdit", 3.0, -0.05)):
        for s in (1e5, 1e6, 1e7):
            out.append({"variant": v, "layers": 2, "d": 64, "params": s, "val_loss": a * s**b})
    return out


def test_csv_roundtrip(tmp_path):
    rows = _rows()
    write_records_csv(tmp_path / "r.csv", rows)
    back = read_records_csv(tmp_path / "r.csv")
    assert back == rows
    (tmp_path / "bad.csv").write_text("variant,layers\nx,1\n")
    with pytest.raises(ValueError):
        read_records_csv(tmp_path / "bad.csv")


def test_svg_point_count_and_report(tmp_path):
    rows = _rows()
    fits = fit_by_variant(rows)
    assert fits["dit_air"].b == pytest.approx(-0.1, abs=1e-9)
    root = ET.fromstring(render_svg(rows, fits))
    circles = [e for e in root.iter() if e.tag.endswith("circle")]
    assert len(circles) == len(rows)
    paths = emit_report(rows, None, tmp_path / "rep")
    assert set(p.name for p in paths.values()) == {"records.csv", "fits.csv", "scaling.svg"}
    ET.parse(paths["chart"])
    assert read_records_csv(paths["records"]) == rows
    assert paths["fits"].read_text().splitlines()[0] == "variant,a,b,rms"


def test_svg_escapes_labels():
    rows = [{"variant": "<x&y>", "layers": 1, "d": 1, "params": 10.0, "val_loss": 1.0}]
    ET.fromstring(render_svg(rows, {}))


def test_csv_columns():
    assert CSV_COLUMNS == ("variant", "layers", "d", "params", "val_loss")
