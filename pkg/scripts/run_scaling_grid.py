"""Train the toy size grid (layers 2/4/6/8, d = 32 * layers) for all three
families, fit L = a S^b per family and write records, fits and a chart."""

import argparse
import time
from pathlib import Path

from ditair.scalinglab import FAMILIES, GRID_STEPS, TOY_LAYERS, emit_report, fit_by_variant, grid_task_config, run_grid, toy_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/scaling"))
    ap.add_argument("--steps", type=int, default=GRID_STEPS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--families", nargs="+", default=list(FAMILIES))
    ap.add_argument("--layers", nargs="+", type=int, default=list(TOY_LAYERS))
    args = ap.parse_args()

    tc = grid_task_config()
    t0 = time.perf_counter()
    records = run_grid(toy_grid(tc, args.families, args.layers), tc, args.steps, seed=args.seed)
    for r in sorted(records, key=lambda r: (r.variant, r.layers)):
        print(f"{r.variant:<10} layers {r.layers}  params {r.params:>10,}  val {r.val_loss:.4f}")
    fits = fit_by_variant([r.row() for r in records])
    for v, f in fits.items():
        print(f"{v}: a={f.a:.4g} b={f.b:+.4f} rms={f.rms:.3g}")
    paths = emit_report(records, fits, args.out)
    print(f"{time.perf_counter() - t0:.0f}s; wrote {', '.join(str(p) for p in paths.values())}")


if __name__ == "__main__":
    main()
