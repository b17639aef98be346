"""Closed-form parameter counts, MAC estimates, and reconciliation against
instantiated models and reported model sizes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .arch import SIZE_PRESETS, VARIANTS, Model, ModelConfig, build_model
from .numerics.errors import AuditError

TABLE_COMPONENTS = ("adaln", "self_mha", "cross_mha", "mlp")

# Reported diffusion-transformer sizes at the B preset (parameters).
REPORTED_TOTALS = {
    "mmdit": 902_000_000,
    "mmdit_shared_adaln": 631_000_000,
    "dit_air": 321_000_000,
    "dit_air_lite_full": 49_000_000,
    "dit_air_lite_attention": 230_000_000,
}


def expected_counts(variant: str, n: int, d: int) -> dict[str, int]:
    """Weight counts per component (biases and norms excluded) plus ``total``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    dd = d * d
    rows = {
        "pixart": (6 * dd, 4 * n * dd, 4 * n * dd, 8 * n * dd),
        "mmdit": (12 * n * dd, 8 * n * dd, 0, 16 * n * dd),
        "mmdit_shared_adaln": (12 * dd, 8 * n * dd, 0, 16 * n * dd),
        "dit_air": (12 * dd, 4 * n * dd, 0, 8 * n * dd),
        "dit_air_lite_full": (12 * dd, 4 * dd, 0, 8 * dd),
        "dit_air_lite_attention": (12 * dd, 4 * dd, 0, 8 * n * dd),
    }[variant]
    out = dict(zip(TABLE_COMPONENTS, rows))
    out["total"] = sum(rows)
    return out


def _overhead_group(name: str, kind: str) -> str:
    if kind == "bias":
        return "biases"
    if kind == "norm":
        return "qk_norm"
    return name.split(".")[0]


@dataclass
class AuditReport:
    variant: str
    n_layers: int
    d: int
    expected: dict[str, int]
    actual: dict[str, int]
    overhead: dict[str, int] = field(default_factory=dict)
    flops: int = 0

    @property
    def overhead_total(self) -> int:
        return sum(self.overhead.values())

    @property
    def total_params(self) -> int:
        return self.actual["total"] + self.overhead_total

    @property
    def mismatches(self) -> list[str]:
        return [c for c in (*TABLE_COMPONENTS, "total") if self.expected[c] != self.actual[c]]


def count_components(model: Model) -> tuple[dict[str, int], dict[str, int]]:
    actual = dict.fromkeys(TABLE_COMPONENTS, 0)
    overhead: dict[str, int] = {}
    for p in model.params:
        if p.kind == "weight" and p.component in actual:
            actual[p.component] += p.size
        else:
            g = _overhead_group(p.name, p.kind)
            overhead[g] = overhead.get(g, 0) + p.size
    actual["total"] = sum(actual[c] for c in TABLE_COMPONENTS)
    return actual, overhead


def audit_model(model: Model, l_text: int | None = None, l_img: int | None = None, strict: bool = True) -> AuditReport:
    cfg = model.config
    n, d = cfg.layers, cfg.width
    actual, overhead = count_components(model)
    if l_text is None:
        l_text = cfg.text_len
    if l_img is None:
        l_img = (cfg.latent_size // cfg.patch) ** 2
    report = AuditReport(
        cfg.variant, n, d, expected_counts(cfg.variant, n, d), actual, overhead,
        flops_estimate(cfg.variant, n, d, l_text, l_img),
    )
    if report.total_params != model.store.count():
        raise AuditError(f"{cfg.variant}: itemised {report.total_params} != stored {model.store.count()}")
    if strict and report.mismatches:
        detail = ", ".join(f"{c}: expected {report.expected[c]} got {report.actual[c]}" for c in report.mismatches)
        raise AuditError(f"{cfg.variant} N={n} d={d}: {detail}")
    return report


def audit_preset(variant: str, size: str) -> AuditReport:
    model = build_model(ModelConfig(variant=variant, size=size), shape_only=True)
    return audit_model(model)


def flops_estimate(variant: str, n: int, d: int, l_text: int, l_img: int) -> int:
    """Multiply-accumulates per forward pass through the transformer blocks.

    Per layer: QKVO projections 4 d^2 per token, score and value products
    2 L_q L_k d, MLP 8 d^2 per token. Softmax, norms, AdaLN and embedders
    are excluded.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if min(n, d) < 1 or min(l_text, l_img) < 0:
        raise ValueError("lengths must be non-negative and n, d positive")
    dd = d * d
    if variant == "pixart":
        self_attn = 4 * dd * l_img + 2 * l_img * l_img * d
        cross = 2 * dd * l_img + 2 * dd * l_text + 2 * l_img * l_text * d
        per_layer = self_attn + cross + 8 * dd * l_img
    else:
        total = l_text + l_img
        per_layer = 4 * dd * total + 2 * total * total * d + 8 * dd * total
    return n * per_layer


def reconcile_overheads() -> dict[str, dict[str, float]]:
    """Reported B-size totals minus closed-form block-weight totals."""
    n = SIZE_PRESETS["B"]
    d = 64 * n
    out = {}
    for variant, reported in REPORTED_TOTALS.items():
        formula = expected_counts(variant, n, d)["total"]
        out[variant] = {"reported": reported, "formula": formula, "overhead": reported - formula}
    return out


def adaln_sharing_delta(size: str = "B") -> int:
    per_layer = count_components(build_model(ModelConfig(variant="mmdit", size=size), shape_only=True))[0]["total"]
    shared = count_components(build_model(ModelConfig(variant="mmdit_shared_adaln", size=size), shape_only=True))[0]["total"]
    return per_layer - shared


def reports_to_csv(rows: list[tuple[str, AuditReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "size", "component", "expected", "actual", "overhead"])
    for size, r in rows:
        for c in TABLE_COMPONENTS:
            w.writerow([r.variant, size, c, r.expected[c], r.actual[c], 0])
        w.writerow([r.variant, size, "total", r.expected["total"], r.actual["total"], r.overhead_total])
    return buf.getvalue()


def format_table(rows: list[tuple[str, AuditReport]]) -> str:
    head = f"{'variant':<24}{'size':<6}" + "".join(f"{c:>16}" for c in (*TABLE_COMPONENTS, "total", "overhead", "ok"))
    lines = [head, "-" * len(head)]
    for size, r in rows:
        cells = "".join(f"{r.actual[c]:>16,}" for c in (*TABLE_COMPONENTS, "total"))
        ok = "yes" if not r.mismatches else "NO"
        lines.append(f"{r.variant:<24}{size:<6}{cells}{r.overhead_total:>16,}{ok:>16}")
    return "\n".join(lines)
