"""Scaling experiments on a synthetic conditional-Gaussian latent task.

Each class owns a prompt and a mean latent; samples are ``mean + sigma * n``.
Because the class fixes a Gaussian, the best achievable flow loss is known in
closed form, which gives every run an absolute yardstick.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import flow
from .arch import Model, ModelConfig, build_model
from .audit import count_components
from .conditioning import CondBundle, TextConditioner, ToyEncoder, drop_conditions
from .numerics.errors import ConfigError, NumericError
from .numerics.optim import OptimState, optim_step
from .numerics.rng import Rng

FAMILIES = ("pixart", "mmdit", "dit_air")
TOY_LAYERS = (2, 4, 6, 8)
CSV_COLUMNS = ("variant", "layers", "d", "params", "val_loss")


@dataclass(frozen=True)
class TaskConfig:
    n_classes: int = 8
    sigma: float = 0.5
    latent_size: int = 8
    latent_channels: int = 4
    text_len: int = 4
    vocab: int = 64
    d_enc: int = 16
    encoder_layers: int = 4
    batch: int = 256
    n_val: int = 512
    lr: float = 2e-3
    p_drop: float = 0.0
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.sigma <= 0:
            raise ConfigError("need n_classes >= 1 and sigma > 0")
        if not 0 <= self.p_drop < 1:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")


class GaussianTask:
    """Class means, prompts, encoded conditions and a fixed validation set."""

    def __init__(self, config: TaskConfig):
        self.config = config
        c = config
        rng = Rng(c.seed, 0x7A5C)
        mean_rng, prompt_rng, val_rng = rng.split(3)
        shape = (c.n_classes, c.latent_size, c.latent_size, c.latent_channels)
        self.means = mean_rng.normal(shape).astype(np.float32)
        self.prompts = prompt_rng.integers(1, c.vocab, (c.n_classes, c.text_len))
        enc = ToyEncoder(c.vocab, c.d_enc, c.encoder_layers, seed=c.seed)
        self.conds = TextConditioner(enc, c.encoder_layers, c.d_enc, seed=c.seed).encode(self.prompts)
        lab_rng, z_rng, eps_rng, t_rng = val_rng.split(4)
        self.val_labels = lab_rng.integers(0, c.n_classes, (c.n_val,))
        z0 = self.means[self.val_labels] + c.sigma * z_rng.normal((c.n_val, *shape[1:]), dtype=np.float32)
        eps = eps_rng.normal(z0.shape, dtype=np.float32)
        t = flow.sample_timestep(flow.TimestepDist(), t_rng, (c.n_val,))
        self.val = flow.make_batch(z0, val_rng, t=t, eps=eps)

    def model_config(self, variant: str, n_layers: int, d: int) -> ModelConfig:
        c = self.config
        return ModelConfig(
            variant=variant, size=None, n_layers=n_layers, d=d,
            latent_channels=c.latent_channels, latent_size=c.latent_size,
            text_len=c.text_len, text_dim=c.d_enc,
        )

    def sample(self, rng: Rng, batch: int):
        labels = rng.integers(0, self.config.n_classes, (batch,))
        z0 = self.means[labels] + self.config.sigma * rng.normal((batch, *self.means.shape[1:]), dtype=np.float32)
        return z0, self.conds.take(labels)

    def optimum(self) -> float:
        """``E_t[Var(z0 - eps | z_t, class)]`` per element."""
        return flow.expected_min_loss(self.config.sigma)

    def oracle_val_loss(self) -> float:
        mu = self.means[self.val_labels]
        pred = flow.gaussian_oracle(self.val.z_t.astype(np.float64), self.val.t, mu, self.config.sigma)
        return float(np.mean((pred - self.val.target) ** 2))

    def val_loss(self, model: Model, chunk: int = 256) -> float:
        total = 0.0
        n = self.config.n_val
        for s in range(0, n, chunk):
            sl = slice(s, min(s + chunk, n))
            pred = model(self.val.z_t[sl], self.conds.take(self.val_labels[sl]), self.val.t[sl])
            total += float(np.sum((pred.astype(np.float64) - self.val.target[sl]) ** 2))
        return total / self.val.target.size


@dataclass
class RunRecord:
    config_hash: str
    variant: str
    layers: int
    d: int
    params: int
    steps: int
    val_loss: float
    train_loss: list[tuple[int, float]] = field(default_factory=list)

    def row(self) -> dict:
        return {"variant": self.variant, "layers": self.layers, "d": self.d, "params": self.params, "val_loss": self.val_loss}


@dataclass(frozen=True)
class PowerLawFit:
    a: float
    b: float
    rms: float

    def __call__(self, s):
        return self.a * np.asarray(s, dtype=np.float64) ** self.b


def config_hash(model_config: ModelConfig, task_config: TaskConfig, steps: int, seed: int) -> str:
    blob = json.dumps(
        {"model": model_config.to_dict(), "task": asdict(task_config), "steps": steps, "seed": seed},
        sort_keys=True,
    )
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def model_size(model: Model) -> int:
    actual, overhead = count_components(model)
    return actual["total"] + sum(overhead.values())


def train_run(model_config: ModelConfig, task_config: TaskConfig, steps: int, rng: Rng, return_model: bool = False):
    """Train one model with the flow loss and score it on the fixed validation set."""
    task = GaussianTask(task_config)
    init_rng, data_rng, flow_rng, drop_rng = rng.split(4)
    model = build_model(model_config, init_rng)
    opt = OptimState(lr=task_config.lr)
    curve = []
    for step in range(steps):
        z0, cond = task.sample(data_rng, task_config.batch)
        if task_config.p_drop > 0:
            cond = drop_conditions(cond, task_config.p_drop, drop_rng)
        batch = flow.make_batch(z0, flow_rng)
        model.zero_grad()
        pred, cache = model.forward_train(batch.z_t, cond, batch.t)
        loss, dpred = flow.flow_loss_grad(pred, batch)
        if not math.isfinite(loss):
            raise NumericError(f"training diverged at step {step}")
        model.backward(cache, dpred)
        optim_step(opt, model.params)
        if (step + 1) % task_config.log_every == 0:
            curve.append((step + 1, loss))
    record = RunRecord(
        config_hash(model_config, task_config, steps, rng.seed),
        model_config.variant, model_config.layers, model_config.width,
        model_size(model), steps, task.val_loss(model), curve,
    )
    return (record, model) if return_model else record


def _run_one(args):
    model_config, task_config, steps, seed = args
    return train_run(model_config, task_config, steps, Rng(seed))


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("DITAIR_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def run_grid(configs: list[ModelConfig], task_config: TaskConfig, steps: int, seed: int = 0) -> list[RunRecord]:
    """Train every config (one per worker) and return records in config-hash order."""
    jobs = [(mc, task_config, steps, seed) for mc in configs]
    workers = worker_count(len(jobs))
    if workers == 1:
        records = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    return sorted(records, key=lambda r: r.config_hash)


# Budget for the layers {2,4,6,8} sweep: 4x4 latents and short runs keep the
# twelve trainings to a few minutes on one core.
GRID_TASK = dict(latent_size=4, batch=32, n_val=256, lr=1e-3)
GRID_STEPS = 100


def grid_task_config(**overrides) -> TaskConfig:
    return TaskConfig(**{**GRID_TASK, **overrides})


def toy_grid(task_config: TaskConfig, families=FAMILIES, layers=TOY_LAYERS) -> list[ModelConfig]:
    task = GaussianTask(task_config)
    return [task.model_config(v, n, 32 * n) for v in families for n in layers]


def fit_power_law(points) -> PowerLawFit:
    """Least squares on ``log L = log a + b log S``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    s, loss = pts[:, 0], pts[:, 1]
    if np.any(s <= 0) or np.any(loss <= 0):
        raise ValueError("sizes and losses must be positive")
    if len(np.unique(s)) < 2:
        raise ValueError("need at least two distinct sizes")
    x, y = np.log(s), np.log(loss)
    xm, ym = x.mean(), y.mean()
    b = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    log_a = ym - b * xm
    resid = y - log_a - b * x
    return PowerLawFit(float(np.exp(log_a)), b, float(np.sqrt(np.mean(resid**2))))


def fit_by_variant(rows) -> dict[str, PowerLawFit]:
    groups: dict[str, list] = {}
    for r in rows:
        groups.setdefault(r["variant"], []).append((r["params"], r["val_loss"]))
    return {v: fit_power_law(pts) for v, pts in sorted(groups.items())}


def write_records_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k == "val_loss" else r[k]) for k in CSV_COLUMNS})


def read_records_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"missing columns {sorted(missing)}")
        return [
            {"variant": r["variant"], "layers": int(r["layers"]), "d": int(r["d"]),
             "params": float(r["params"]), "val_loss": float(r["val_loss"])}
            for r in reader
        ]


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(rows, fits: dict[str, PowerLawFit], width: int = 640, height: int = 420) -> str:
    """Log-log chart of validation loss against model size, one marker per record."""
    margin = 60
    s = np.array([r["params"] for r in rows], dtype=np.float64)
    loss = np.array([r["val_loss"] for r in rows], dtype=np.float64)
    lx0, lx1 = np.log10(s.min()), np.log10(s.max())
    ly0, ly1 = np.log10(loss.min()), np.log10(loss.max())
    lx1 = lx1 if lx1 > lx0 else lx0 + 1
    ly1 = ly1 if ly1 > ly0 else ly0 + 1
    pad_y = 0.05 * (ly1 - ly0)
    ly0, ly1 = ly0 - pad_y, ly1 + pad_y

    def px(v):
        return margin + (np.log10(v) - lx0) / (lx1 - lx0) * (width - 2 * margin)

    def py(v):
        return height - margin - (np.log10(v) - ly0) / (ly1 - ly0) * (height - 2 * margin)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle" font-size="13">parameters (log scale)</text>',
        f'<text x="18" y="{height / 2}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {height / 2})">validation loss (log scale)</text>',
    ]
    variants = sorted({r["variant"] for r in rows})
    for i, v in enumerate(variants):
        color = COLORS[i % len(COLORS)]
        if v in fits:
            f = fits[v]
            xs = np.array([s.min(), s.max()])
            out.append(
                f'<line x1="{px(xs[0]):.2f}" y1="{py(f(xs[0])):.2f}" x2="{px(xs[1]):.2f}" y2="{py(f(xs[1])):.2f}" '
                f'stroke="{color}" stroke-dasharray="5,3"/>'
            )
        label = escape(v if v not in fits else f"{v}: L = {fits[v].a:.3g} S^{fits[v].b:.3f}")
        out.append(f'<text x="{width - margin - 4}" y="{margin + 16 * i}" text-anchor="end" font-size="12" fill="{color}">{label}</text>')
    for r in rows:
        color = COLORS[variants.index(r["variant"]) % len(COLORS)]
        out.append(f'<circle cx="{px(r["params"]):.2f}" cy="{py(r["val_loss"]):.2f}" r="4" fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(records, fits: dict[str, PowerLawFit] | None, out_path) -> dict[str, Path]:
    """Write ``records.csv``, ``fits.csv`` and ``scaling.svg`` under ``out_path``."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.row() if isinstance(r, RunRecord) else r for r in records]
    fits = fit_by_variant(rows) if fits is None else fits
    paths = {"records": out / "records.csv", "fits": out / "fits.csv", "chart": out / "scaling.svg"}
    write_records_csv(paths["records"], rows)
    with open(paths["fits"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "a", "b", "rms"])
        for v, f in sorted(fits.items()):
            w.writerow([v, repr(f.a), repr(f.b), repr(f.rms)])
    paths["chart"].write_text(render_svg(rows, fits))
    return paths
