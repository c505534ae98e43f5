"""Hypergradient descent on the transport factor L with a coverage penalty.

Each iteration solves the lower-level conic program, differentiates its
optimal value through the solution map, adds the gradient of the smoothed
coverage penalty, takes an entrywise-clipped step and projects back onto
lower-triangular factors whose Gram matrix has a bounded spectrum.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .conic_diff import SingularJacobian, adjoint_derivative
from .conic_solver import PrimalDualSolution, SolverError, SolverSettings, solve
from .coverage import (BootstrapMode, PenaltyConfig, base_distribution, bootstrap,
                       calibrate_epsilon, penalty_term_gradient, penalty_terms,
                       replica_distances)
from .problems import BUILDER_ORDER, BuilderId, DatasetView, ProblemInstance, build, parameter_gradient
from .transport import TransportParam

log = logging.getLogger(__name__)

RIDGE = 1e-8
TRACE_COLUMNS = ("iter", "phi", "objective", "penalty", "e_theta", "grad_norm", "step", "events")


class Schedule(str, Enum):
    CONSTANT = "constant"
    INVERSE_ITER = "inverse_iter"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    step: float = 1e-4
    schedule: Schedule = Schedule.CONSTANT
    tol: float = 1e-6
    lam_p: float = 10.0
    eta_p: float = 100.0
    maxiter: int = 1_000_000
    grad_clip: tuple[float, float] = (-1000.0, 1000.0)
    eig_clip: tuple[float, float] = (1e-6, 1e6)
    n_b: int = 20
    beta: float = 0.1
    seed: int = 0
    gamma: float = 0.05
    eps_override: float | None = None
    solver_tol: float = 1e-9

    def __post_init__(self):
        self.schedule = Schedule(self.schedule)
        self.grad_clip = tuple(float(v) for v in self.grad_clip)
        self.eig_clip = tuple(float(v) for v in self.eig_clip)
        if self.step <= 0 or self.maxiter < 1 or self.n_b < 1:
            raise ValueError("step, maxiter and n_b must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not 0.0 < self.eig_clip[0] <= self.eig_clip[1]:
            raise ValueError("eig_clip must satisfy 0 < lo <= hi")
        if self.grad_clip[0] > self.grad_clip[1]:
            raise ValueError("grad_clip must satisfy lo <= hi")


@dataclass
class TraceRecord:
    iter: int
    phi: float
    objective: float
    penalty: float
    e_theta: float
    grad_norm: float
    step: float
    events: tuple[str, ...] = ()
    # decision at this iterate; kept in memory only, not written to CSV
    w: np.ndarray | None = field(default=None, repr=False)


@dataclass
class TrainTrace:
    records: list[TraceRecord]
    theta: TransportParam
    w: np.ndarray
    eps: float
    phi: float
    objective: float
    e_theta: float
    theta0: TransportParam | None = None
    w0: np.ndarray | None = None
    objective0: float = math.nan
    e_theta0: float = math.nan
    instance: ProblemInstance | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def phis(self) -> np.ndarray:
        return np.array([r.phi for r in self.records] + [self.phi])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(TRACE_COLUMNS)
            for r in self.records:
                wr.writerow([r.iter] + [format(v, ".17g") for v in
                                        (r.phi, r.objective, r.penalty, r.e_theta,
                                         r.grad_norm, r.step)] + [";".join(r.events)])


def step_size(schedule: Schedule | str, base: float, i: int) -> float:
    if i < 1:
        raise ValueError("iteration index starts at 1")
    return base if Schedule(schedule) is Schedule.CONSTANT else base / i


def project_param(L_raw, eig_clip=(1e-6, 1e6), p: int = 1) -> TransportParam:
    """Eigenvalue-clip ``M = L L^T`` and return its Cholesky factor."""
    L_raw = np.asarray(L_raw, dtype=float)
    if not np.all(np.isfinite(L_raw)):
        raise TrainingError("parameter update is not finite")
    M = L_raw @ L_raw.T
    lam, V = np.linalg.eigh(0.5 * (M + M.T))
    lam = np.clip(lam, eig_clip[0], eig_clip[1])
    M = (V * lam) @ V.T
    return TransportParam(np.linalg.cholesky(0.5 * (M + M.T)), p)


@dataclass
class _State:
    param: TransportParam
    instance: ProblemInstance
    solution: PrimalDualSolution
    objective: float
    e: float
    J_e: np.ndarray

    def phi(self, lam_p: float) -> float:
        return self.objective + lam_p * max(0.0, self.e) ** 2


def _cost_sensitivity(instance: ProblemInstance, solution: PrimalDualSolution) -> np.ndarray:
    """Contribution of an L-dependent cost vector; every builder has a fixed ``c``."""
    d = instance.theta_shape[0]
    return np.zeros((d, d))


def hypergradient(param: TransportParam, instance: ProblemInstance,
                  solution: PrimalDualSolution, coverage_state, cfg: TrainConfig):
    """One element of the hypergradient of the penalized objective.

    ``coverage_state`` is ``(e, J_e)``. Returns ``(gradient, events)``.
    """
    events = []
    c = instance.conic.c
    try:
        adj = adjoint_derivative(solution, instance.conic, dx=c)
    except SingularJacobian:
        events.append("ridge")
        log.info("singular residual Jacobian, using ridge %.0e", RIDGE)
        adj = adjoint_derivative(solution, instance.conic, dx=c, ridge=RIDGE)
    grad = parameter_gradient(instance, adj, param.L)
    grad = grad + _cost_sensitivity(instance, solution)
    e, J_e = coverage_state
    pen = PenaltyConfig(cfg.beta, cfg.lam_p, cfg.eta_p, 1.0)
    grad = grad + penalty_term_gradient(e, np.tril(J_e), pen)
    return grad, events


class _Problem:
    """Holds the fixed data of one training run and evaluates states."""

    def __init__(self, builder_id, data, cfg: TrainConfig):
        self.bid = BuilderId(builder_id)
        self.cfg = cfg
        self.data = data if isinstance(data, DatasetView) else DatasetView(data)
        self.p = BUILDER_ORDER[self.bid]
        self.mode = (BootstrapMode.GAUSSIAN if self.bid is BuilderId.PORTFOLIO_GAUSSIAN
                     else BootstrapMode.DISCRETE)
        self.base = base_distribution(self.data.samples, self.mode)
        self.boots = bootstrap(self.data.samples, cfg.n_b, self.mode, cfg.seed)
        self.reference = self.base if self.mode is BootstrapMode.GAUSSIAN else self.data
        self.settings = SolverSettings(tol=cfg.solver_tol)
        self.eps = None
        self.last = None

    def calibrate(self, param: TransportParam) -> float:
        if self.cfg.eps_override is not None:
            self.eps = float(self.cfg.eps_override)
        else:
            self.eps = calibrate_epsilon(replica_distances(param, self.base, self.boots),
                                         self.cfg.beta)
        if not self.eps > 0:
            raise TrainingError("calibrated radius is zero (degenerate bootstrap)")
        return self.eps

    def evaluate(self, param: TransportParam, it: int) -> _State:
        inst = build(self.bid, self.reference, self.eps, param, self.cfg.gamma)
        sol = solve(inst.conic, self.settings, self.last)
        self.last = sol
        if not sol.optimal:
            raise SolverError(f"iteration {it}: lower-level solve ended with "
                              f"status {sol.status.value}")
        pen = PenaltyConfig(self.cfg.beta, self.cfg.lam_p, self.cfg.eta_p, self.eps)
        e, J_e, _ = penalty_terms(param, self.base, self.boots, pen)
        obj = float(inst.conic.c @ sol.x)
        st = _State(param, inst, sol, obj, e, J_e)
        if not np.isfinite(st.phi(self.cfg.lam_p)):
            raise TrainingError(f"iteration {it}: penalized objective is not finite "
                                f"(objective {obj}, e {e})")
        return st


def train(builder_id, data, cfg: TrainConfig | None = None) -> TrainTrace:
    cfg = cfg or TrainConfig()
    prob = _Problem(builder_id, data, cfg)
    theta = TransportParam.identity(prob.data.d, prob.p)
    prob.calibrate(theta)
    cur = prob.evaluate(theta, 0)
    start = cur
    records: list[TraceRecord] = []
    lo, hi = cfg.grad_clip
    for i in range(1, cfg.maxiter + 1):
        grad, events = hypergradient(cur.param, cur.instance, cur.solution,
                                     (cur.e, cur.J_e), cfg)
        gnorm = float(np.linalg.norm(grad))
        clipped = np.clip(grad, lo, hi)
        if np.any(clipped != grad):
            events.append("clip")
        a = step_size(cfg.schedule, cfg.step, i)
        nxt = prob.evaluate(project_param(cur.param.L - a * clipped, cfg.eig_clip, prob.p), i)
        phi_i, phi_n = cur.phi(cfg.lam_p), nxt.phi(cfg.lam_p)
        decrease = (phi_i - phi_n) / max(abs(phi_i), 1e-12)
        stop = decrease < cfg.tol
        if stop and phi_n > phi_i:
            events.append("reject")
        records.append(TraceRecord(i, phi_i, cur.objective, phi_i - cur.objective,
                                   cur.e, gnorm, a, tuple(events),
                                   cur.instance.decision(cur.solution.x)))
        if not (stop and phi_n > phi_i):
            cur = nxt
        if stop:
            break
    return TrainTrace(records, cur.param, cur.instance.decision(cur.solution.x), prob.eps,
                      cur.phi(cfg.lam_p), cur.objective, cur.e,
                      theta0=start.param, w0=start.instance.decision(start.solution.x),
                      objective0=start.objective, e_theta0=start.e, instance=cur.instance)
