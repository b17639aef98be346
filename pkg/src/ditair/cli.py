"""Command line entry point: audit, train, sample, fit-scaling, vae.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import audit as A
from . import scalinglab as S
from . import vaetoy as V
from .arch import SIZE_PRESETS, VARIANTS, ModelConfig, build_model
from .numerics.checkpoint import read_checkpoint, write_checkpoint
from .numerics.errors import AuditError, ConfigError, DimensionError, NumericError
from .numerics.rng import Rng
from .sampler import SamplerConfig, generate

COMMANDS = ("audit", "train", "sample", "fit-scaling", "vae")


def _dataclass_defaults(cls, **override):
    out = {f.name: f.default for f in fields(cls)}
    out.update(override)
    return out


def default_config() -> dict[str, dict]:
    sampler = _dataclass_defaults(SamplerConfig)
    sampler.pop("seed")
    sampler["n_samples"] = 4
    sampler["vae"] = ""
    return {
        "run": {"seed": 0, "steps": 1000, "stage": 1, "input": ""},
        "model": {"variant": "dit_air", "size": "", "layers": 2, "d": 64, "patch": 2, "use_pooled": True},
        "task": _dataclass_defaults(S.TaskConfig, p_drop=0.1),
        "sampler": sampler,
        "vae": {**_dataclass_defaults(V.VaeConfig), "n_images": 512},
    }


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {type(like).__name__}") from None
    return value


def set_key(cfg: dict, key: str, value) -> None:
    """Set ``section.key`` (or a bare key that names exactly one section's key)."""
    if "." in key:
        section, name = key.split(".", 1)
    else:
        owners = [s for s, body in cfg.items() if key in body]
        if len(owners) != 1:
            raise ConfigError(f"unknown or ambiguous key {key!r}; qualify it as section.key")
        section, name = owners[0], key
    if section not in cfg or name not in cfg[section]:
        raise ConfigError(f"unknown config key {section}.{name}")
    like = cfg[section][name]
    cfg[section][name] = _coerce(value, like) if isinstance(value, str) else type(like)(value)


def load_ini(path, cfg: dict) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    for section in parser.sections():
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]")
        for name, value in parser.items(section):
            set_key(cfg, f"{section}.{name}", value)


def blob_sha1(data: bytes) -> str:
    """Git's blob object hash."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_sha1(path) -> str:
    return blob_sha1(Path(path).read_bytes())


def write_manifest(out: Path, command: str, cfg: dict, inputs: list[str], outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "inputs": {p: file_sha1(p) for p in inputs if p},
        "outputs": {p.name: file_sha1(p) for p in sorted(outputs)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path, command: str, cfg: dict) -> None:
    data = json.loads(Path(path).read_text())
    if data.get("command") != command:
        raise ConfigError(f"manifest is for {data.get('command')!r}, not {command!r}")
    for section, body in data["config"].items():
        for name, value in body.items():
            set_key(cfg, f"{section}.{name}", value)
    for p, digest in data.get("inputs", {}).items():
        if not Path(p).exists() or file_sha1(p) != digest:
            raise ConfigError(f"input {p} is missing or changed since the manifest was written")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ditair", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file, or a manifest.json from an earlier run")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--size", choices=tuple(SIZE_PRESETS))
        sp.add_argument("--steps", type=int)
        sp.add_argument("--cfg", type=float, help="guidance weight")
        sp.add_argument("--stage", type=int, choices=(1, 2))
        sp.add_argument("--input", help="checkpoint or CSV input")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def resolve(args) -> dict:
    cfg = default_config()
    if args.config:
        if str(args.config).endswith(".json"):
            load_manifest(args.config, args.command, cfg)
        else:
            load_ini(args.config, cfg)
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), v.strip())
    flag_map = {
        "seed": "run.seed", "variant": "model.variant", "size": "model.size",
        "cfg": "sampler.guidance", "stage": "run.stage", "input": "run.input",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag)
        if value is not None:
            set_key(cfg, key, str(value))
    if args.steps is not None:
        target = {"sample": "sampler.steps", "vae": None}.get(args.command, "run.steps")
        if target is None:
            target = "vae.steps_stage1" if cfg["run"]["stage"] == 1 else "vae.steps_stage2"
        set_key(cfg, target, str(args.steps))
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    m, t = cfg["model"], cfg["task"]
    shape = {"size": m["size"]} if m["size"] else {"size": None, "n_layers": m["layers"], "d": m["d"]}
    return ModelConfig(
        variant=m["variant"], patch=m["patch"], use_pooled=m["use_pooled"],
        latent_channels=t["latent_channels"], latent_size=t["latent_size"],
        text_len=t["text_len"], text_dim=t["d_enc"], **shape,
    )


def _task_config(cfg: dict) -> S.TaskConfig:
    return S.TaskConfig(**cfg["task"])


def _out_dir(args) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_out(args) -> Path:
    out = _out_dir(args)
    if out is None:
        raise ConfigError(f"{args.command} needs --out")
    return out


# -- subcommands --------------------------------------------------------------


def cmd_audit(args, cfg) -> int:
    m = cfg["model"]
    explicit = args.variant is not None or m["variant"] != default_config()["model"]["variant"]
    variants = [m["variant"]] if explicit else list(VARIANTS)
    sizes = [m["size"]] if m["size"] else list(SIZE_PRESETS)
    rows = [(size, A.audit_preset(v, size)) for v in variants for size in sizes]
    for size, r in rows:
        print(f"{r.variant} {size} (N={r.n_layers}, d={r.d}): formula total {r.expected['total']:,}")
    print(A.format_table(rows))
    if len(rows) == 1:
        r = rows[0][1]
        for c in A.TABLE_COMPONENTS:
            print(f"  {c:<10}{r.actual[c]:>16,}")
        print(f"  {'overhead':<10}{r.overhead_total:>16,}")
        print(f"  {'MACs':<10}{r.flops:>16,}  per forward pass through the blocks")
    out = _out_dir(args)
    if out is not None:
        path = out / "audit.csv"
        path.write_text(A.reports_to_csv(rows))
        write_manifest(out, "audit", cfg, [], [path])
    return 0


def cmd_train(args, cfg) -> int:
    out = _need_out(args)
    mc = _model_config(cfg)
    tc = _task_config(cfg)
    record, model = S.train_run(mc, tc, cfg["run"]["steps"], Rng(cfg["run"]["seed"]), return_model=True)
    ckpt = out / "model.dita"
    write_checkpoint(ckpt, model.state_entries())
    metrics = out / "metrics.csv"
    with open(metrics, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss"])
        w.writerows([s, repr(float(l))] for s, l in record.train_loss)
    summary = out / "summary.json"
    optimum = S.GaussianTask(tc).optimum()
    summary.write_text(json.dumps(
        {"params": record.params, "val_loss": record.val_loss, "optimum": optimum, "config_hash": record.config_hash},
        indent=2, sort_keys=True,
    ) + "\n")
    write_manifest(out, "train", cfg, [], [ckpt, metrics, summary])
    print(f"val_loss {record.val_loss:.6f} (optimum {optimum:.6f}); checkpoint {ckpt}")
    return 0


def _pgm(path: Path, img: np.ndarray) -> None:
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape[:2]
    magic = b"P5" if data.ndim == 2 else b"P6"
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + data.tobytes())


def cmd_sample(args, cfg) -> int:
    out = _need_out(args)
    mc = _model_config(cfg)
    seed = cfg["run"]["seed"]
    model = build_model(mc, Rng(seed, 0x5EED))
    ckpt = cfg["run"]["input"]
    if ckpt:
        model.load_state(read_checkpoint(ckpt))
    sc = cfg["sampler"]
    scfg = SamplerConfig(steps=sc["steps"], guidance=sc["guidance"], churn=sc["churn"], seed=seed, final_euler=sc["final_euler"])
    task = S.GaussianTask(_task_config(cfg))
    labels = np.arange(sc["n_samples"]) % task.config.n_classes
    z = generate(model, task.conds.take(labels), scfg, Rng(seed))
    outputs = [out / "latents.npy"]
    np.save(outputs[0], z)
    vae = None
    if sc["vae"]:
        vae = V.load_vae(V.VaeConfig(**_vae_kwargs(cfg)), read_checkpoint(sc["vae"]))
        if vae.channels != mc.latent_channels:
            raise DimensionError(f"VAE has {vae.channels} latent channels, model {mc.latent_channels}")
    for i, zi in enumerate(z):
        mosaic = np.concatenate(list(np.moveaxis(zi, -1, 0)), axis=1)
        outputs.append(out / f"sample_{i:03d}.pgm")
        _pgm(outputs[-1], mosaic)
        if vae is not None:
            img = vae.decode(zi[None].astype(np.float32))[0]
            outputs.append(out / f"decoded_{i:03d}.pgm")
            _pgm(outputs[-1], img[..., 0])
        elif zi.shape[-1] >= 3:
            outputs.append(out / f"sample_{i:03d}.ppm")
            _pgm(outputs[-1], zi[..., :3])
    stats = out / "stats.csv"
    with open(stats, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "mean", "std", "min", "max"])
        for i, zi in enumerate(z):
            w.writerow([i, int(labels[i]), *(repr(float(f(zi))) for f in (np.mean, np.std, np.min, np.max))])
    outputs.append(stats)
    write_manifest(out, "sample", cfg, [p for p in (ckpt, sc["vae"]) if p], outputs)
    print(f"wrote {len(z)} samples to {out}")
    return 0


def cmd_fit_scaling(args, cfg) -> int:
    src = cfg["run"]["input"]
    if not src:
        raise ConfigError("fit-scaling needs --input runs.csv")
    out = _need_out(args)
    rows = S.read_records_csv(src)
    fits = S.fit_by_variant(rows)
    paths = S.emit_report(rows, fits, out)
    for v, f in fits.items():
        print(f"{v}: a={f.a:.6g} b={f.b:.6g} rms={f.rms:.3g}")
    write_manifest(out, "fit-scaling", cfg, [src], list(paths.values()))
    return 0


def _vae_kwargs(cfg) -> dict:
    return {k: v for k, v in cfg["vae"].items() if k != "n_images"}


def cmd_vae(args, cfg) -> int:
    out = _need_out(args)
    vc = V.VaeConfig(**_vae_kwargs(cfg))
    stage = cfg["run"]["stage"]
    seed = cfg["run"]["seed"]
    data = V.make_textures(cfg["vae"]["n_images"], vc.image_size, vc.image_channels, Rng(seed, 0x7E))
    src = cfg["run"]["input"]
    prev = None
    if stage == 2:
        if not src:
            raise ConfigError("vae --stage 2 needs --input pointing at a stage-1 checkpoint")
        prev = V.load_vae(vc, read_checkpoint(src))
        if prev.channels != vc.c1:
            raise DimensionError(f"checkpoint has {prev.channels} latent channels, expected c1={vc.c1}")
    model, metrics = V.train_vae(vc, data, stage, Rng(seed, stage), model=prev)
    ckpt = out / f"vae_stage{stage}.dita"
    write_checkpoint(ckpt, [(p.name, p.value) for p in model.params])
    mpath = out / "metrics.csv"
    with open(mpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mse", "kl"])
        w.writerows([s, repr(float(m)), repr(float(k))] for s, m, k in metrics)
    kl = V.measure_kl(model, data)
    print(f"stage {stage}: channels {model.channels}, final mse {metrics[-1][1]:.5f}, kl {kl:.4f}")
    write_manifest(out, "vae", cfg, [src] if src else [], [ckpt, mpath])
    return 0


HANDLERS = {
    "audit": cmd_audit, "train": cmd_train, "sample": cmd_sample,
    "fit-scaling": cmd_fit_scaling, "vae": cmd_vae,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        return HANDLERS[args.command](args, cfg)
    except NumericError as exc:
        print(f"ditair: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DimensionError, AuditError, ValueError, OSError) as exc:
        print(f"ditair: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
