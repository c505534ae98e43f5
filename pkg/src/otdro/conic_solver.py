"""Dense operator-splitting solver for standard-form conic programs.

Solves::

    minimize    c^T x
    subject to  A x + s = b,  s in K

together with its dual (``A^T y + c = 0``, ``y in K*``). The main loop is
ADMM on the homogeneous self-dual embedding; once its residuals are moderate
the iterate is refined by semismooth Newton steps on the KKT residual map, so
downstream implicit differentiation sees residuals near machine precision.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .cones import ConeKind, ConeSpec, project_dual

log = logging.getLogger(__name__)


class Status(str, Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class SolverError(RuntimeError):
    """Raised by callers that need an optimal solution and did not get one."""


@dataclass(frozen=True)
class ConicProblemData:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    cone: ConeSpec

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        c = np.asarray(self.c, dtype=float).ravel()
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        m, n = A.shape
        if b.shape[0] != m or c.shape[0] != n:
            raise ValueError(f"shape mismatch: A {A.shape}, b {b.shape}, c {c.shape}")
        if self.cone.total_dim != m:
            raise ValueError(f"cone dimension {self.cone.total_dim} != rows of A ({m})")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise ValueError("problem data contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist(), "c": self.c.tolist(),
                "cones": self.cone.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "ConicProblemData":
        A = np.asarray(obj["A"], dtype=float)
        c = np.asarray(obj["c"], dtype=float)
        if A.size == 0:
            A = A.reshape(0, c.shape[0])
        return cls(A, np.asarray(obj["b"], dtype=float), c, ConeSpec.from_json(obj["cones"]))


def load_problem(path: str | Path) -> ConicProblemData:
    with open(path) as fh:
        return ConicProblemData.from_json(json.load(fh))


@dataclass
class PrimalDualSolution:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    status: Status
    iterations: int = 0
    primal_res: float = np.inf
    dual_res: float = np.inf
    gap: float = np.inf
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class SolverSettings:
    tol: float = 1e-9
    max_iter: int = 200_000
    relaxation: float = 1.6
    scaling: bool = True
    # ADMM accuracy reached before each Newton refinement attempt
    admm_tol: float = 1e-4
    polish: bool = True
    check_every: int = 10
    # Newton refinement is also tried this often, in case the splitting stalls
    polish_every: int = 500
    divergence_ratio: float = 1e8

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.relaxation < 2.0:
            raise ValueError("relaxation must lie in (0, 2)")


def kkt_residuals(problem: ConicProblemData, candidate: PrimalDualSolution
                  ) -> tuple[float, float, float]:
    """Unnormalized KKT residuals ``(||Ax+s-b||, ||A^T y + c||, |s^T y|)``."""
    A, b, c = problem.A, problem.b, problem.c
    x, y, s = (np.asarray(v, dtype=float) for v in (candidate.x, candidate.y, candidate.s))
    m, n = A.shape
    if x.shape != (n,) or y.shape != (m,) or s.shape != (m,):
        raise ValueError("candidate dimensions do not match the problem")
    return (float(np.linalg.norm(A @ x + s - b)),
            float(np.linalg.norm(A.T @ y + c)),
            float(abs(s @ y)))


def _normalized_ok(problem, x, y, s, tol) -> tuple[bool, tuple[float, float, float]]:
    A, b, c = problem.A, problem.b, problem.c
    pres = np.linalg.norm(A @ x + s - b)
    dres = np.linalg.norm(A.T @ y + c)
    cx, by = c @ x, b @ y
    gap = abs(cx + by)
    ok = (pres <= tol * (1 + np.linalg.norm(b))
          and dres <= tol * (1 + np.linalg.norm(c))
          and gap <= tol * (1 + abs(cx) + abs(by)))
    return ok, (pres, dres, gap)


def _equilibrate(problem: ConicProblemData, iters: int = 25):
    """Ruiz equilibration; rows of a second-order cone block share one factor."""
    A = problem.A.copy()
    m, n = A.shape
    D, E = np.ones(m), np.ones(n)
    groups = [(blk, sl) for blk, sl in problem.cone.slices()]
    for _ in range(iters):
        rn = np.max(np.abs(A), axis=1) if n else np.zeros(m)
        for blk, sl in groups:
            if blk.kind is ConeKind.SOC:
                rn[sl] = np.max(rn[sl])
        rn = np.where(rn > 0, rn, 1.0)
        cn = np.max(np.abs(A), axis=0) if m else np.zeros(n)
        cn = np.where(cn > 0, cn, 1.0)
        dr, dc = 1.0 / np.sqrt(rn), 1.0 / np.sqrt(cn)
        A = dr[:, None] * A * dc[None, :]
        D *= dr
        E *= dc
        if np.all(np.abs(rn - 1) < 1e-3) and np.all(np.abs(cn - 1) < 1e-3):
            break
    scaled = ConicProblemData(A, D * problem.b, E * problem.c, problem.cone)
    return scaled, D, E


class _Admm:
    """ADMM on the homogeneous self-dual embedding (dense LU of I + Q)."""

    def __init__(self, problem: ConicProblemData, relaxation: float):
        self.p = problem
        A, b, c = problem.A, problem.b, problem.c
        m, n = A.shape
        self.m, self.n = m, n
        N = n + m + 1
        Q = np.zeros((N, N))
        Q[:n, n:n + m] = A.T
        Q[:n, -1] = c
        Q[n:n + m, :n] = -A
        Q[n:n + m, -1] = b
        Q[-1, :n] = -c
        Q[-1, n:n + m] = -b
        self.lu = sla.lu_factor(np.eye(N) + Q)
        self.alpha = relaxation
        self.u = np.zeros(N)
        self.u[-1] = 1.0
        self.v = np.zeros(N)
        self.v[-1] = 1.0

    def step(self):
        n, m = self.n, self.m
        ut = sla.lu_solve(self.lu, self.u + self.v)
        ut = self.alpha * ut + (1 - self.alpha) * self.u
        w = ut - self.v
        w[n:n + m] = project_dual(self.p.cone, w[n:n + m])
        w[-1] = max(w[-1], 0.0)
        self.v = self.v - ut + w
        self.u = w

    def iterate(self):
        n, m = self.n, self.m
        tau = self.u[-1]
        return self.u[:n], self.u[n:n + m], self.v[n:n + m], tau, self.v[-1]


def _polish(problem: ConicProblemData, x, y, s, max_steps: int = 30):
    """Semismooth Newton refinement on the residual map N(z) = 0, z = (x, y - s)."""
    from .conic_diff import residual, residual_jacobian

    n = problem.A.shape[1]
    z = np.concatenate([x, y - s])
    r = residual(z, problem)
    nr = np.linalg.norm(r)
    for _ in range(max_steps):
        if nr <= 1e-15 * (1 + np.linalg.norm(problem.b) + np.linalg.norm(problem.c)):
            break
        Jz = residual_jacobian(z, problem).J_z
        try:
            dz = np.linalg.solve(Jz, -r)
        except np.linalg.LinAlgError:
            dz = np.linalg.lstsq(Jz, -r, rcond=None)[0]
        t, improved = 1.0, False
        while t > 1e-6:
            z_new = z + t * dz
            r_new = residual(z_new, problem)
            nr_new = np.linalg.norm(r_new)
            if nr_new < nr:
                z, r, nr, improved = z_new, r_new, nr_new, True
                break
            t *= 0.5
        if not improved:
            break
    u, v = z[:n], z[n:]
    yp = project_dual(problem.cone, v)
    return u.copy(), yp, yp - v


def solve(problem: ConicProblemData, settings: SolverSettings | None = None,
          guess: PrimalDualSolution | None = None) -> PrimalDualSolution:
    """Solve a conic program to the KKT tolerance in ``settings``.

    A ``guess`` (for instance the solution of a nearby problem) is first refined
    by Newton steps alone; the splitting iterations run only if that fails.
    """
    settings = settings or SolverSettings()
    m, n = problem.A.shape
    if guess is not None and guess.x.shape == (n,) and guess.y.shape == (m,):
        x, y, s = _polish(problem, guess.x, guess.y, guess.s)
        ok, res = _normalized_ok(problem, x, y, s, settings.tol)
        if ok:
            return PrimalDualSolution(x, y, s, Status.OPTIMAL, 0, *res, info={"warm": True})
    if settings.scaling and m and n:
        scaled, D, E = _equilibrate(problem)
    else:
        scaled, D, E = problem, np.ones(m), np.ones(n)

    admm = _Admm(scaled, settings.relaxation)
    target = settings.admm_tol
    best = None
    k = 0
    while k < settings.max_iter:
        admm.step()
        k += 1
        if k % settings.check_every and k != settings.max_iter:
            continue
        xu, yu, su, tau, kappa = admm.iterate()
        unorm = np.linalg.norm(admm.u[:-1])
        if tau <= 0 or unorm > settings.divergence_ratio * tau:
            status = _certificate(scaled, xu, yu, su, settings.admm_tol)
            if status is not None:
                return _failed(problem, status, k, E * xu, D * yu, su / D)
            continue
        xs, ys, ss = xu / tau, yu / tau, su / tau
        reached, _ = _normalized_ok(scaled, xs, ys, ss, target)
        if not reached and not (settings.polish and k % settings.polish_every == 0):
            continue
        x, y, s = E * xs, D * ys, ss / D
        if settings.polish:
            x, y, s = _polish(problem, x, y, s)
        ok, res = _normalized_ok(problem, x, y, s, settings.tol)
        if best is None or max(res) < max(best[3]):
            best = (x, y, s, res)
        if ok:
            return PrimalDualSolution(x, y, s, Status.OPTIMAL, k, *res)
        if reached:
            target = max(target * 1e-2, 1e-14)

    if best is None:
        xu, yu, su, tau, _ = admm.iterate()
        tau = tau if tau > 0 else 1.0
        x, y, s = E * xu / tau, D * yu / tau, su / tau / D
        best = (x, y, s, _normalized_ok(problem, x, y, s, settings.tol)[1])
    x, y, s, res = best
    log.warning("conic solve hit max_iter=%d (residuals %.2e %.2e %.2e)",
                settings.max_iter, *res)
    return PrimalDualSolution(x, y, s, Status.MAX_ITER, k, *res)


def _certificate(problem, xu, yu, su, eps):
    A, b, c = problem.A, problem.b, problem.c
    by = b @ yu
    if by < 0 and np.linalg.norm(A.T @ yu) <= eps * -by:
        return Status.INFEASIBLE
    cx = c @ xu
    if cx < 0 and np.linalg.norm(A @ xu + su) <= eps * -cx:
        return Status.UNBOUNDED
    return None


def _failed(problem, status, k, x, y, s):
    res = kkt_residuals(problem, PrimalDualSolution(x, y, s, status))
    return PrimalDualSolution(x, y, s, status, k, *res)


def solve_or_raise(problem: ConicProblemData, settings: SolverSettings | None = None
                   ) -> PrimalDualSolution:
    sol = solve(problem, settings)
    if not sol.optimal:
        raise SolverError(f"conic solver returned status {sol.status.value} "
                          f"(residuals {sol.primal_res:.2e}, {sol.dual_res:.2e}, {sol.gap:.2e})")
    return sol
