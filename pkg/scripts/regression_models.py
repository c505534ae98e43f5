"""Least-absolute-deviation regression on the ten tabulated linear models.

Prints worst-case and out-of-sample loss before and after learning the metric.
"""
import argparse
import logging
from pathlib import Path

from otdro.experiments import ExperimentConfig, Family, make_train_config, run_experiment, regression_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/regression_models"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--loss", choices=("abs", "sq"), default="abs")
    ap.add_argument("--maxiter", type=int, default=10**6)
    ap.add_argument("--oos-samples", type=int, default=10**6)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    args.out.mkdir(parents=True, exist_ok=True)

    family = Family.REGRESSION_ABS if args.loss == "abs" else Family.REGRESSION_SQ
    cfg = ExperimentConfig(family=family, k=1, J=20, trials=10, fixed_models=True, seed=args.seed,
                           oos_samples=args.oos_samples,
                           train=make_train_config({"maxiter": args.maxiter}))
    res = run_experiment(cfg, args.out)
    print(f"{'model':>5} {'w':>8} {'sigma^2':>8} {'f0':>10} {'f*':>10} {'l0':>10} {'l*':>10}")
    for r in res.rows:
        m = regression_model(r.trial)
        print(f"{r.trial:5d} {m.w:8.4f} {m.sigma ** 2:8.2f} {r.f0:10.4f} {r.f_star:10.4f} "
              f"{r.l0:10.4f} {r.l_star:10.4f}")
    for t, msg in sorted(res.failures.items()):
        print(f"{t:5d} failed: {msg}")


if __name__ == "__main__":
    main()
