import json
import subprocess
import sys

import numpy as np
import pytest

from ditair.cli import blob_sha1, default_config, run, set_key
from ditair.numerics.errors import ConfigError
from ditair.scalinglab import write_records_csv

FAST_TASK = ["task.latent_size=4", "task.batch=8", "task.n_val=16", "layers=2", "d=16"]


def _tree(root):
    return sorted((str(p.relative_to(root)), p.read_bytes()) for p in root.rglob("*") if p.is_file())


def test_audit_dit_air_b(capsys):
    assert run(["audit", "--variant", "dit_air", "--size", "B"]) == 0
    out = capsys.readouterr().out
    assert "formula total 302,579,712" in out
    for c in ("adaln", "self_mha", "mlp"):
        assert c in out


def test_audit_writes_csv(tmp_path):
    assert run(["audit", "--size", "S", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "audit.csv").read_text().splitlines()
    assert lines[0] == "variant,size,component,expected,actual,overhead"
    assert len(lines) == 1 + 6 * 5
    assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "audit"


def test_validation_errors(tmp_path, capsys):
    assert run(["audit", "nonsense.key=3"]) == 1
    assert run(["audit", "steps=abc"]) == 1
    assert run(["explode"]) == 1
    assert run(["train"]) == 1
    assert run(["fit-scaling", "--out", str(tmp_path)]) == 1
    assert run(["vae", "--stage", "2", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path):
    argv = ["train", "--out", str(tmp_path), "--steps", "5", *FAST_TASK, "task.lr=1e30"]
    assert run(argv) == 2


def test_set_key():
    cfg = default_config()
    set_key(cfg, "guidance", "2.5")
    set_key(cfg, "model.layers", "4")
    set_key(cfg, "use_pooled", "false")
    assert cfg["sampler"]["guidance"] == 2.5 and cfg["model"]["layers"] == 4
    assert cfg["model"]["use_pooled"] is False
    with pytest.raises(ConfigError):
        set_key(cfg, "nope", "1")
    with pytest.raises(ConfigError):
        set_key(cfg, "seed", "1")  # ambiguous: run.seed and task.seed


def test_blob_sha1_matches_git():
    assert blob_sha1(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_sample_is_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert run(["sample", "--steps", "5", "--cfg", "7.5", "--seed", "7", "--out", str(d), *FAST_TASK]) == 0
        outs.append(_tree(d))
    assert outs[0] == outs[1]
    names = [n for n, _ in outs[0]]
    assert "latents.npy" in names and "stats.csv" in names and "sample_000.pgm" in names
    z = np.load(tmp_path / "a" / "latents.npy")
    assert z.shape == (4, 4, 4, 4)


def test_train_then_sample_with_checkpoint(tmp_path):
    tr = tmp_path / "train"
    assert run(["train", "--out", str(tr), "--steps", "3", *FAST_TASK]) == 0
    summary = json.loads((tr / "summary.json").read_text())
    assert summary["val_loss"] > 0 and summary["optimum"] == pytest.approx(0.81108, abs=1e-4)
    sa = tmp_path / "sample"
    assert run(["sample", "--input", str(tr / "model.dita"), "--steps", "3", "--out", str(sa), *FAST_TASK]) == 0
    manifest = json.loads((sa / "manifest.json").read_text())
    assert list(manifest["inputs"].values()) == [blob_sha1((tr / "model.dita").read_bytes())]


def test_manifest_replay(tmp_path):
    a = tmp_path / "a"
    assert run(["sample", "--steps", "4", "--seed", "3", "--out", str(a), *FAST_TASK]) == 0
    b = tmp_path / "b"
    assert run(["sample", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    ta = [x for x in _tree(a) if x[0] != "manifest.json"]
    tb = [x for x in _tree(b) if x[0] != "manifest.json"]
    assert ta == tb


def test_ini_config(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nvariant = mmdit\nsize = S\n")
    assert run(["audit", "--config", str(ini)]) == 0
    ini.write_text("[model]\nbogus = 1\n")
    assert run(["audit", "--config", str(ini)]) == 1


def test_fit_scaling_synthetic(tmp_path, capsys):
    rows = [{"variant": "dit_air", "layers": 2, "d": 64, "params": s, "val_loss": 2.0 * s**-0.3} for s in (1e6, 1e7, 1e8)]
    write_records_csv(tmp_path / "runs.csv", rows)
    out = tmp_path / "report"
    assert run(["fit-scaling", "--input", str(tmp_path / "runs.csv"), "--out", str(out)]) == 0
    assert "dit_air: a=2 b=-0.3" in capsys.readouterr().out
    assert (out / "scaling.svg").exists() and (out / "fits.csv").exists()


def test_vae_stages(tmp_path, capsys):
    s1 = tmp_path / "s1"
    common = ["vae.n_images=32", "vae.batch=8"]
    assert run(["vae", "--stage", "1", "--steps", "4", "--out", str(s1), *common]) == 0
    header = (s1 / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,mse,kl"
    s2 = tmp_path / "s2"
    assert run(["vae", "--stage", "2", "--steps", "3", "--input", str(s1 / "vae_stage1.dita"), "--out", str(s2), *common]) == 0
    assert "channels 8" in capsys.readouterr().out
    bad = tmp_path / "bad"
    assert run(["vae", "--stage", "2", "--input", str(s2 / "vae_stage2.dita"), "--out", str(bad), *common]) == 1


def test_outputs_stay_in_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "keep.txt").write_text("x")
    before = _tree(tmp_path)
    assert run(["sample", "--steps", "2", "--out", "o", *FAST_TASK]) == 0
    after = [x for x in _tree(tmp_path) if not x[0].startswith("o/")]
    assert after == before


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "ditair.cli", "audit", "--variant", "pixart", "--size", "S"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "formula total" in r.stdout
