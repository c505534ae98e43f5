"""Synthetic experiments: data generators, out-of-sample metrics and orchestration.

Every random draw derives from one base seed. Trial ``t`` of an experiment
uses ``SeedSequence([seed, t])`` spawned into independent streams for the
data, the bootstrap and the out-of-sample evaluation; true distributions use
``SeedSequence([seed, index, 0])`` so several datasets can share one truth.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

from .coverage import MOMENT_RIDGE
from .problems import BuilderId, DatasetView, build
from .conic_solver import solve_or_raise
from .trainer import TrainConfig, TrainTrace, train
from .transport import (DiscreteDistribution, GaussianMoments, TransportParam,
                        discrete_distance, gelbrich_distance)

log = logging.getLogger(__name__)

# (w, sigma^2) of the ten regression models used for the multi-experiment runs
REGRESSION_MODELS = (
    (-6.7805, 564.285), (-5.8464, 625.412), (-2.7811, 699.653), (-1.3851, 710.190),
    (-0.0144, 783.458), (4.3483, 846.372), (6.3163, 915.492), (7.1061, 922.537),
    (8.5174, 932.399), (8.9350, 978.001),
)


class Family(str, Enum):
    PORTFOLIO_GAUSSIAN = "portfolio_gaussian"
    PORTFOLIO_DISCRETE = "portfolio_discrete"
    PORTFOLIO_GMM = "portfolio_gmm"
    REGRESSION_ABS = "regression_abs"
    REGRESSION_SQ = "regression_sq"


FAMILY_BUILDER = {
    Family.PORTFOLIO_GAUSSIAN: BuilderId.PORTFOLIO_GAUSSIAN,
    Family.PORTFOLIO_DISCRETE: BuilderId.PORTFOLIO_T1,
    Family.PORTFOLIO_GMM: BuilderId.PORTFOLIO_T1,
    Family.REGRESSION_ABS: BuilderId.REGRESSION_ABS,
    Family.REGRESSION_SQ: BuilderId.REGRESSION_SQ,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- generators

@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    components: tuple

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.components), size=n, p=self.weights)
        out = np.empty((n, self.components[0].dim))
        for i, c in enumerate(self.components):
            idx = np.flatnonzero(comp == i)
            out[idx] = sample_gaussian(c, idx.size, rng)
        return out

    @property
    def mean(self) -> np.ndarray:
        return sum(w * c.mean for w, c in zip(self.weights, self.components))


@dataclass(frozen=True)
class LinRegModel:
    w: float
    sigma: float
    x_low: float = -10.0
    x_high: float = 10.0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        x = rng.uniform(self.x_low, self.x_high, n)
        y = self.w * x + self.sigma * rng.standard_normal(n)
        return np.column_stack([x, y])


def sample_gaussian(m: GaussianMoments, n: int, rng: np.random.Generator) -> np.ndarray:
    lam, V = np.linalg.eigh(m.cov)
    root = V * np.sqrt(np.maximum(lam, 0.0))
    return m.mean + rng.standard_normal((n, m.dim)) @ root.T


def sample_true(dist, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(dist, GaussianMoments):
        return sample_gaussian(dist, n, rng)
    if isinstance(dist, DiscreteDistribution):
        return dist.points[rng.choice(dist.weights.size, size=n, p=dist.weights)]
    return dist.sample(n, rng)


def _random_cov(k: int, rng: np.random.Generator, lo=0.01, hi=0.1) -> np.ndarray:
    St = rng.uniform(lo, hi, (k, k))
    return St @ St.T + 1e-6 * np.eye(k)


def gen_gaussian_experiment(k: int, seed) -> GaussianMoments:
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-1.0, 1.0, k)
    return GaussianMoments(mu, _random_cov(k, rng))


def gen_discrete_experiment(k: int, n_atoms: int = 10, seed=0) -> DiscreteDistribution:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.0, 1.0, (n_atoms, k))
    w = rng.dirichlet(np.ones(n_atoms))
    return DiscreteDistribution(pts, w / w.sum())


def gen_gmm_experiment(k: int, n_comp: int = 3, seed=0) -> GaussianMixture:
    rng = np.random.default_rng(seed)
    comps = tuple(GaussianMoments(rng.uniform(-1.0, 1.0, k), _random_cov(k, rng))
                  for _ in range(n_comp))
    w = rng.dirichlet(np.ones(n_comp))
    return GaussianMixture(w / w.sum(), comps)


def gen_linreg_experiment(seed=0, single: bool = False) -> LinRegModel:
    if single:
        return LinRegModel(1.0, 10.0)
    rng = np.random.default_rng(seed)
    w = rng.uniform(-10.0, 10.0)
    return LinRegModel(float(w), float(np.sqrt(rng.uniform(500.0, 1000.0))))


def regression_model(i: int) -> LinRegModel:
    w, var = REGRESSION_MODELS[i % len(REGRESSION_MODELS)]
    return LinRegModel(w, math.sqrt(var))


# ------------------------------------------------------- out-of-sample metrics

def eval_oos_cvar(w, true_dist, gamma: float, n_samples: int = 10**6, seed=0) -> float:
    """Monte-Carlo CVaR of the loss ``-w^T xi``: mean of the worst ``gamma`` fraction."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    losses = -sample_true(true_dist, int(n_samples), rng) @ np.asarray(w, float)
    m = max(1, math.ceil(round(gamma * losses.size, 9)))
    return float(np.mean(np.partition(losses, losses.size - m)[losses.size - m:]))


def eval_oos_mean_loss(w, true_dist, n_samples: int = 10**6, seed=0) -> float:
    return eval_oos_cvar(w, true_dist, 1.0, n_samples, seed)


def eval_oos_expected_loss(w, sampler, loss: str = "abs", n_samples: int = 10**6,
                           seed=0) -> float:
    """Mean of ``|(-w, 1)^T xi|`` (``abs``) or its square (``sq``)."""
    rng = np.random.default_rng(seed)
    xi = sample_true(sampler, int(n_samples), rng)
    r = xi @ np.append(-np.atleast_1d(np.asarray(w, float)), 1.0)
    if loss == "abs":
        return float(np.mean(np.abs(r)))
    if loss == "sq":
        return float(np.mean(r * r))
    raise ValueError(f"unknown loss {loss!r}")


# ------------------------------------------------------------- orchestration

@dataclass
class ExperimentConfig:
    family: Family = Family.PORTFOLIO_GAUSSIAN
    k: int = 3
    J: int = 30
    n_b: int = 20
    beta: float = 0.1
    gamma: float = 0.05
    eps_override: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    trials: int = 1
    datasets_per_truth: int = 1
    oos_samples: int = 10**6
    seed: int = 0
    # regression only: fixed model w=1, sigma=10, or the ten tabulated models
    single_instance: bool = False
    fixed_models: bool = False
    distance_replication: int = 50

    def __post_init__(self):
        try:
            self.family = Family(self.family)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if isinstance(self.train, dict):
            self.train = make_train_config(self.train)
        for name in ("k", "J", "n_b", "trials", "datasets_per_truth", "oos_samples",
                     "distance_replication"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 < self.beta < 1.0 or not 0.0 < self.gamma < 1.0:
            raise ConfigError("beta and gamma must lie in (0, 1)")
        # the trainer reads these from its own config
        self.train.n_b, self.train.beta, self.train.gamma = self.n_b, self.beta, self.gamma
        self.train.eps_override = self.eps_override

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def builder(self) -> BuilderId:
        return FAMILY_BUILDER[self.family]

    @property
    def is_regression(self) -> bool:
        return self.family in (Family.REGRESSION_ABS, Family.REGRESSION_SQ)


def make_train_config(obj: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"unknown train fields: {sorted(extra)}")
    try:
        return TrainConfig(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class MetricsRow:
    trial: int
    f0: float
    f_star: float
    l0: float
    l_star: float
    rel_f: float
    rel_l: float
    e_theta: float
    dist0: float
    dist_star: float
    eps: float
    iterations: int

    HEADER = ("trial", "f0", "f_star", "l0", "l_star", "rel_f", "rel_l", "e_theta",
              "dist0", "dist_star", "eps", "iterations")

    def as_row(self) -> list[str]:
        return [fmt(getattr(self, h)) for h in self.HEADER]


@dataclass
class ExperimentResult:
    rows: list[MetricsRow]
    traces: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def trial_streams(seed: int, trial: int, n: int = 3) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence([int(seed), int(trial)]).spawn(n)


def true_distribution(cfg: ExperimentConfig, index: int):
    ss = np.random.SeedSequence([int(cfg.seed), int(index), 0])
    if cfg.family is Family.PORTFOLIO_GAUSSIAN:
        return gen_gaussian_experiment(cfg.k, ss)
    if cfg.family is Family.PORTFOLIO_DISCRETE:
        return gen_discrete_experiment(cfg.k, 10, ss)
    if cfg.family is Family.PORTFOLIO_GMM:
        return gen_gmm_experiment(cfg.k, 3, ss)
    if cfg.single_instance:
        return gen_linreg_experiment(single=True)
    if cfg.fixed_models:
        return regression_model(index)
    return gen_linreg_experiment(ss)


def out_of_sample(cfg: ExperimentConfig, w, truth, seed) -> float:
    if cfg.family is Family.PORTFOLIO_GAUSSIAN:
        return eval_oos_cvar(w, truth, cfg.gamma, cfg.oos_samples, seed)
    if cfg.family in (Family.PORTFOLIO_DISCRETE, Family.PORTFOLIO_GMM):
        return eval_oos_mean_loss(w, truth, cfg.oos_samples, seed)
    loss = "abs" if cfg.family is Family.REGRESSION_ABS else "sq"
    return eval_oos_expected_loss(w, truth, loss, cfg.oos_samples, seed)


def truth_distance(cfg: ExperimentConfig, truth, samples: np.ndarray,
                   param: TransportParam, seed) -> float:
    """Transport distance between the true distribution and the reference.

    Exact for Gaussian and discrete truths. Otherwise ``r * J`` fresh draws are
    matched against the reference atoms repeated ``r`` times.
    """
    if cfg.family is Family.PORTFOLIO_GAUSSIAN:
        ref = GaussianMoments.from_samples(samples, MOMENT_RIDGE)
        return gelbrich_distance(truth, ref, param)
    ref = DiscreteDistribution.empirical(samples)
    if isinstance(truth, DiscreteDistribution):
        return discrete_distance(truth, ref, param)
    r = cfg.distance_replication
    draws = sample_true(truth, r * samples.shape[0], np.random.default_rng(seed))
    return discrete_distance(DiscreteDistribution.empirical(draws),
                             DiscreteDistribution.empirical(np.repeat(samples, r, axis=0)),
                             param)


def run_trial(cfg: ExperimentConfig, trial: int) -> tuple[MetricsRow, TrainTrace]:
    truth = true_distribution(cfg, trial // cfg.datasets_per_truth)
    s_data, s_boot, s_eval = trial_streams(cfg.seed, trial)
    samples = sample_true(truth, cfg.J, np.random.default_rng(s_data))
    tcfg = TrainConfig(**{**asdict(cfg.train),
                          "seed": int(s_boot.generate_state(1, np.uint32)[0])})
    trace = train(cfg.builder, DatasetView(samples), tcfg)
    eval_seed = int(s_eval.generate_state(1, np.uint32)[0])
    f0 = trace.instance.robust_value(trace.objective0)
    fs = trace.instance.robust_value(trace.objective)
    l0 = out_of_sample(cfg, trace.w0, truth, eval_seed)
    ls = out_of_sample(cfg, trace.w, truth, eval_seed)
    d0 = truth_distance(cfg, truth, samples, trace.theta0, eval_seed) / trace.eps
    ds = truth_distance(cfg, truth, samples, trace.theta, eval_seed) / trace.eps
    row = MetricsRow(trial, f0, fs, l0, ls, (f0 - fs) / abs(f0), (l0 - ls) / abs(l0),
                     trace.e_theta, d0, ds, trace.eps, len(trace))
    return row, trace


def write_metrics(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MetricsRow.HEADER)
        for r in rows:
            wr.writerow(r.as_row())


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   prefix: str = "") -> ExperimentResult:
    """Train and evaluate ``cfg.trials`` independent trials; failures are recorded."""
    result = ExperimentResult([])
    for t in range(cfg.trials):
        try:
            row, trace = run_trial(cfg, t)
        except Exception as exc:  # a failed trial must not stop the run
            log.error("trial %d failed: %s", t, exc)
            result.failures[t] = f"{type(exc).__name__}: {exc}"
            continue
        result.rows.append(row)
        result.traces[t] = trace
        if out_dir is not None:
            trace.write_csv(Path(out_dir) / f"{prefix}trace_{t}.csv")
    if out_dir is not None:
        write_metrics(result.rows, Path(out_dir) / f"{prefix}metrics.csv")
        if result.failures:
            with open(Path(out_dir) / f"{prefix}failures.csv", "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(("trial", "error"))
                for t, msg in sorted(result.failures.items()):
                    wr.writerow((t, msg))
    return result


def sensitivity_sweep(cfg: ExperimentConfig, lam_grid, eta_grid,
                      out_dir: str | Path | None = None):
    """Mean relative improvement of the worst-case objective and the 90th
    percentile of the final coverage violation over a (lam_p, eta_p) grid."""
    lam_grid, eta_grid = list(lam_grid), list(eta_grid)
    improve = np.full((len(lam_grid), len(eta_grid)), np.nan)
    violation = np.full_like(improve, np.nan)
    failures = {}
    for i, lam in enumerate(lam_grid):
        for j, eta in enumerate(eta_grid):
            tc = TrainConfig(**{**asdict(cfg.train), "lam_p": float(lam), "eta_p": float(eta)})
            sub = ExperimentConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)},
                                      "train": tc})
            res = run_experiment(sub)
            failures.update({(lam, eta, t): m for t, m in res.failures.items()})
            if res.rows:
                improve[i, j] = np.mean([r.rel_f for r in res.rows])
                violation[i, j] = np.percentile([r.e_theta for r in res.rows], 90)
    if out_dir is not None:
        for name, mat in (("improvement", improve), ("violation", violation)):
            with open(Path(out_dir) / f"sensitivity_{name}.csv", "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["lam_p"] + [fmt(e) for e in eta_grid])
                for lam, row in zip(lam_grid, mat):
                    wr.writerow([fmt(lam)] + [fmt(v) for v in row])
    return improve, violation, failures


# ------------------------------------------------- single-instance utilities

def trial_data(cfg: ExperimentConfig, trial: int = 0):
    """``(truth, samples)`` exactly as :func:`run_trial` draws them."""
    truth = true_distribution(cfg, trial // cfg.datasets_per_truth)
    s_data = trial_streams(cfg.seed, trial)[0]
    return truth, sample_true(truth, cfg.J, np.random.default_rng(s_data))


def _problem(cfg: ExperimentConfig, samples, trial: int):
    from .trainer import _Problem
    s_boot = trial_streams(cfg.seed, trial)[1]
    tcfg = TrainConfig(**{**asdict(cfg.train),
                          "seed": int(s_boot.generate_state(1, np.uint32)[0])})
    prob = _Problem(cfg.builder, DatasetView(samples), tcfg)
    prob.calibrate(TransportParam.identity(prob.data.d, prob.p))
    return prob


def build_from_config(cfg: ExperimentConfig, L=None, trial: int = 0):
    """Conic instance of one trial, radius calibrated at the identity."""
    _, samples = trial_data(cfg, trial)
    prob = _problem(cfg, samples, trial)
    L = np.eye(prob.data.d) if L is None else np.asarray(L, dtype=float)
    return build(cfg.builder, prob.reference, prob.eps, TransportParam(L, prob.p), cfg.gamma)


def evaluate_theta(cfg: ExperimentConfig, L, trial: int = 0) -> dict:
    """Worst-case value, out-of-sample loss, coverage violation and distance at ``L``."""
    truth, samples = trial_data(cfg, trial)
    prob = _problem(cfg, samples, trial)
    param = TransportParam(np.asarray(L, dtype=float), prob.p)
    st = prob.evaluate(param, 0)
    w = st.instance.decision(st.solution.x)
    eval_seed = int(trial_streams(cfg.seed, trial)[2].generate_state(1, np.uint32)[0])
    return {"w": w.tolist(), "eps": prob.eps,
            "worst_case": st.instance.robust_value(st.objective),
            "out_of_sample": out_of_sample(cfg, w, truth, eval_seed),
            "e_theta": st.e,
            "normalized_distance": truth_distance(cfg, truth, samples, param, eval_seed) / prob.eps}


# ----------------------------------------------------------------- repro

REPRO_NAMES = ("fig1", "fig2", "fig3", "fig4", "sensitivity")
SENSITIVITY_LAMBDA = (0.0, 1.0, 10.0, 100.0)
SENSITIVITY_ETA = (10.0, 100.0, 1000.0)


def repro_plan(name: str, seed: int, trials: int | None = None,
               maxiter: int | None = None, oos_samples: int | None = None):
    """``[(tag, ExperimentConfig), ...]`` for one reproduction target."""
    def cfg(n_default, train=None, **kw):
        tc = dict(train or {})
        if maxiter is not None:
            tc["maxiter"] = int(maxiter)
        return ExperimentConfig(seed=seed, trials=trials or n_default,
                                oos_samples=oos_samples or 10**6,
                                train=make_train_config(tc), **kw)

    G, RA, RS = Family.PORTFOLIO_GAUSSIAN, Family.REGRESSION_ABS, Family.REGRESSION_SQ
    plans = {
        "fig1": lambda: [("single", cfg(1, family=G, k=2, J=30)),
                         ("J10", cfg(10, family=G, k=3, J=10)),
                         ("J30", cfg(10, family=G, k=3, J=30))],
        "fig2": lambda: [("lam10", cfg(10, family=G, k=3, J=30)),
                         ("lam0", cfg(10, {"lam_p": 0.0}, family=G, k=3, J=30))],
        "fig3": lambda: [("abs", cfg(1, family=RA, k=1, J=20, n_b=20, single_instance=True)),
                         ("sq", cfg(1, family=RS, k=1, J=20, n_b=10, single_instance=True))],
        "fig4": lambda: [("models", cfg(10, family=RA, k=1, J=20, fixed_models=True))],
        "sensitivity": lambda: [("sens", cfg(2, family=G, k=10, J=50))],
    }
    if name not in plans:
        raise ConfigError(f"unknown repro target {name!r}")
    return plans[name]()


def iterate_errors(cfg: ExperimentConfig, trace: TrainTrace, truth, seed,
                   points: int = 50) -> list[tuple]:
    """``(iter, worst-case value, out-of-sample loss)`` along a trace, subsampled."""
    n = len(trace.records)
    idx = np.unique(np.linspace(0, n - 1, min(n, points)).astype(int)) if n else []
    rows = [(trace.records[i].iter,
             trace.instance.robust_value(trace.records[i].objective),
             out_of_sample(cfg, trace.records[i].w, truth, seed)) for i in idx]
    rows.append((n + 1, trace.instance.robust_value(trace.objective),
                 out_of_sample(cfg, trace.w, truth, seed)))
    return rows


_GNUPLOT = """set datafile separator ','
set key autotitle columnhead
set xlabel 'iteration'
plot for [f in system('ls {prefix}trace_*.csv')] f using 1:2 with lines title f
"""


def run_repro(name: str, seed: int, out_dir: str | Path, trials: int | None = None,
              maxiter: int | None = None, oos_samples: int | None = None) -> int:
    """Write the CSVs of one reproduction target; returns the number of failed trials."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for tag, cfg in repro_plan(name, seed, trials, maxiter, oos_samples):
        prefix = f"{name}_{tag}_"
        if name == "sensitivity":
            _, _, fails = sensitivity_sweep(cfg, SENSITIVITY_LAMBDA, SENSITIVITY_ETA, out)
            failures += len(fails)
            continue
        res = run_experiment(cfg, out, prefix)
        failures += len(res.failures)
        (out / f"{prefix}plot.gp").write_text(_GNUPLOT.format(prefix=prefix))
        if name == "fig3":
            for t, trace in res.traces.items():
                truth, _ = trial_data(cfg, t)
                seed_t = int(trial_streams(cfg.seed, t)[2].generate_state(1, np.uint32)[0])
                with open(out / f"{prefix}errors_{t}.csv", "w", newline="") as fh:
                    wr = csv.writer(fh, lineterminator="\n")
                    wr.writerow(("iter", "e_wc", "e_oos"))
                    for r in iterate_errors(cfg, trace, truth, seed_t):
                        wr.writerow([fmt(v) for v in r])
    return failures
