"""Command-line entry point.

Exit status is 0 on success, 1 when a solve or training trial fails and 2 on
invalid input or configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .conic_solver import ConicProblemData, SolverSettings, solve
from .transport import (DiscreteDistribution, GaussianMoments, TransportParam,
                        discrete_distance, discrete_distance_gradient,
                        gelbrich_distance, gelbrich_gradient)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ex.ConfigError(f"{path}: {exc}") from exc


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _distribution(obj):
    if "mean" in obj:
        return GaussianMoments(obj["mean"], obj["cov"])
    if "points" in obj:
        pts = np.asarray(obj["points"], dtype=float)
        w = obj.get("weights")
        return (DiscreteDistribution.empirical(pts) if w is None
                else DiscreteDistribution(pts, w))
    raise ex.ConfigError("a distribution needs 'mean'/'cov' or 'points'/'weights'")


def _theta(obj, p=None) -> TransportParam:
    if isinstance(obj, dict):
        return TransportParam(obj["L"], int(p if p is not None else obj.get("p", 1)))
    return TransportParam(obj, int(p or 1))


def _experiment(path, args) -> ex.ExperimentConfig:
    obj = _load_json(path)
    if getattr(args, "seed", None) is not None:
        obj["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        obj["trials"] = args.trials
    if getattr(args, "oos_samples", None) is not None:
        obj["oos_samples"] = args.oos_samples
    if getattr(args, "maxiter", None) is not None:
        obj.setdefault("train", {})["maxiter"] = args.maxiter
    return ex.ExperimentConfig.from_dict(obj)


def cmd_solve(args) -> int:
    problem = ConicProblemData.from_json(_load_json(args.problem))
    sol = solve(problem, SolverSettings(tol=args.tol))
    _emit({"status": sol.status.value, "objective": float(problem.c @ sol.x),
           "x": sol.x.tolist(), "y": sol.y.tolist(), "s": sol.s.tolist(),
           "iterations": sol.iterations, "primal_res": sol.primal_res,
           "dual_res": sol.dual_res, "gap": sol.gap})
    return EXIT_OK if sol.optimal else EXIT_FAIL


def cmd_distance(args) -> int:
    a, b = _distribution(_load_json(args.a)), _distribution(_load_json(args.b))
    if type(a) is not type(b):
        raise ex.ConfigError("both distributions must be discrete or both Gaussian")
    gaussian = isinstance(a, GaussianMoments)
    param = _theta(_load_json(args.L), 2 if gaussian else args.p)
    if args.grad:
        fn = gelbrich_gradient if gaussian else discrete_distance_gradient
        val, grad = fn(a, b, param, value=True)
        _emit({"distance": float(val), "gradient": np.asarray(grad).tolist()})
    else:
        fn = gelbrich_distance if gaussian else discrete_distance
        _emit({"distance": float(fn(a, b, param))})
    return EXIT_OK


def cmd_build(args) -> int:
    cfg = _experiment(args.config, args)
    L = None if args.theta is None else _theta(_load_json(args.theta)).L
    inst = ex.build_from_config(cfg, L, args.trial)
    obj = inst.conic.to_json()
    obj["eps"] = inst.eps
    obj["builder"] = inst.builder_id.value
    text = json.dumps(obj, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args.config, args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    res = ex.run_experiment(cfg, args.out)
    for t, trace in res.traces.items():
        np.savetxt(Path(args.out) / f"theta_{t}.csv", trace.theta.L, delimiter=",",
                   fmt="%.17g")
    for t, msg in sorted(res.failures.items()):
        logging.error("trial %d: %s", t, msg)
    return EXIT_FAIL if res.failures else EXIT_OK


def cmd_eval(args) -> int:
    cfg = _experiment(args.config, args)
    _emit(ex.evaluate_theta(cfg, _theta(_load_json(args.theta)).L, args.trial))
    return EXIT_OK


def cmd_repro(args) -> int:
    fails = ex.run_repro(args.target, args.seed, args.out, args.trials, args.maxiter,
                         args.oos_samples)
    return EXIT_FAIL if fails else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _experiment(args.config, args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    _, _, fails = ex.sensitivity_sweep(cfg, args.lambda_grid, args.eta_grid, args.out)
    return EXIT_FAIL if fails else EXIT_OK


def _overrides(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--trials", type=int)
    p.add_argument("--maxiter", type=int)
    p.add_argument("--oos-samples", type=int)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="otdro", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve a conic program given as JSON")
    p.add_argument("problem")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("distance", help="transport distance between two distributions")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--L", required=True, help='JSON file with {"L": [[...]], "p": 1|2}')
    p.add_argument("--p", type=int, choices=(1, 2))
    p.add_argument("--grad", action="store_true")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("build", help="emit the conic data of one experiment trial")
    p.add_argument("config")
    p.add_argument("--theta")
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--out")
    _overrides(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="run an experiment and write metrics and traces")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    _overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a given factor L on one trial")
    p.add_argument("config")
    p.add_argument("--theta", required=True)
    p.add_argument("--trial", type=int, default=0)
    _overrides(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("repro", help="regenerate the data behind one figure")
    p.add_argument("target", choices=ex.REPRO_NAMES)
    p.add_argument("--out", required=True)
    _overrides(p, seed_required=True)
    p.set_defaults(func=cmd_repro)

    p = sub.add_parser("sweep", help="penalty-parameter sensitivity grid")
    p.add_argument("config")
    p.add_argument("--lambda-grid", type=float, nargs="+", required=True)
    p.add_argument("--eta-grid", type=float, nargs="+", required=True)
    p.add_argument("--out", required=True)
    _overrides(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ex.ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
