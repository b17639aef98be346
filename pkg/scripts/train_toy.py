"""Train one toy model on the conditional-Gaussian task and compare its
validation loss with the analytic optimum."""

import argparse
import time

from ditair.arch import VARIANTS
from ditair.numerics.rng import Rng
from ditair.scalinglab import GaussianTask, TaskConfig, train_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variant", choices=VARIANTS, default="dit_air")
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    tc = TaskConfig()
    task = GaussianTask(tc)
    t0 = time.perf_counter()
    rec = train_run(task.model_config(args.variant, args.layers, args.d), tc, args.steps, Rng(args.seed))
    for step, loss in rec.train_loss:
        print(f"step {step:>5}  train {loss:.4f}")
    opt = task.optimum()
    print(f"val {rec.val_loss:.4f}  optimum {opt:.4f}  ratio {rec.val_loss / opt:.3f}  ({time.perf_counter() - t0:.0f}s, {rec.params:,} params)")


if __name__ == "__main__":
    main()
