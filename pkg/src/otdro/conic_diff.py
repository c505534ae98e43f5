"""Derivatives of the conic solution map through the KKT residual map.

With ``z = (u, v) = (x, y - s)`` and ``Pi(z) = (u, Pi_K*(v))`` the residual is

    N(z, A, b, c) = (Q - I) Pi(z) + (c, b) + z,   Q = [[0, A^T], [-A, 0]],

which vanishes exactly at primal-dual solutions. Forward and adjoint products
with the solution-map Jacobian reduce to least-squares solves with one element
``J_z`` of the conservative Jacobian of ``N``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .cones import project_dual, projection_jacobian_dual
from .conic_solver import ConicProblemData, PrimalDualSolution

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


class SingularJacobian(np.linalg.LinAlgError):
    """The residual Jacobian is numerically singular (nondifferentiable point)."""


@dataclass
class EmbeddingPoint:
    u: np.ndarray
    v: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.u, self.v])

    @classmethod
    def from_solution(cls, sol: PrimalDualSolution) -> "EmbeddingPoint":
        return cls(np.asarray(sol.x, float), np.asarray(sol.y, float) - np.asarray(sol.s, float))


@dataclass
class ResidualJacobian:
    J_z: np.ndarray
    J_pi: np.ndarray      # Jacobian of the dual-cone projection at v (m x m)
    x: np.ndarray         # u
    y: np.ndarray         # Pi_K*(v)

    def apply_data(self, dA, db, dc) -> np.ndarray:
        """Directional derivative of N in the data, ``(dA^T y + dc, -dA x + db)``."""
        return np.concatenate([dA.T @ self.y + dc, -dA @ self.x + db])


def _split(z, problem):
    z = np.asarray(z, dtype=float)
    m, n = problem.A.shape
    if z.shape != (n + m,):
        raise ValueError(f"embedding point has shape {z.shape}, expected {(n + m,)}")
    return z[:n], z[n:]


def residual(z, problem: ConicProblemData) -> np.ndarray:
    if isinstance(z, EmbeddingPoint):
        z = z.z
    u, v = _split(z, problem)
    A = problem.A
    pv = project_dual(problem.cone, v)
    return np.concatenate([A.T @ pv + problem.c,
                           -A @ u - pv + problem.b + v])


def residual_jacobian(z, problem: ConicProblemData) -> ResidualJacobian:
    """``J_z = (Q - I) J_Pi + I`` with ``J_Pi = blockdiag(I_n, J_{Pi_K*}(v))``."""
    if isinstance(z, EmbeddingPoint):
        z = z.z
    u, v = _split(z, problem)
    A = problem.A
    m, n = A.shape
    Jp = projection_jacobian_dual(problem.cone, v)
    J = np.zeros((n + m, n + m))
    J[:n, n:] = A.T @ Jp
    J[n:, :n] = -A
    J[n:, n:] = np.eye(m) - Jp
    return ResidualJacobian(J, Jp, u.copy(), project_dual(problem.cone, v))


def _lstsq(J: np.ndarray, rhs: np.ndarray, ridge: float | None) -> np.ndarray:
    """Least-squares solve of ``J x = rhs`` via pivoted QR with a conditioning check."""
    N = J.shape[0]
    if ridge is not None:
        # Tikhonov: min ||J x - rhs||^2 + ridge ||x||^2
        aug = np.vstack([J, np.sqrt(ridge) * np.eye(N)])
        return np.linalg.lstsq(aug, np.concatenate([rhs, np.zeros(N)]), rcond=None)[0]
    Qm, R, perm = sla.qr(J, pivoting=True)
    d = np.abs(np.diag(R))
    if d.size and (d[-1] == 0.0 or d[0] / d[-1] > COND_LIMIT):
        raise SingularJacobian(
            f"residual Jacobian is singular (condition estimate "
            f"{np.inf if d[-1] == 0 else d[0] / d[-1]:.2e})")
    sol = sla.solve_triangular(R, Qm.T @ rhs)
    out = np.empty_like(sol)
    out[perm] = sol
    return out


def _check_dims(problem, dA, db, dc):
    m, n = problem.A.shape
    dA = np.zeros((m, n)) if dA is None else np.asarray(dA, float)
    db = np.zeros(m) if db is None else np.asarray(db, float)
    dc = np.zeros(n) if dc is None else np.asarray(dc, float)
    if dA.shape != (m, n) or db.shape != (m,) or dc.shape != (n,):
        raise ValueError("perturbation dimensions do not match the problem")
    return dA, db, dc


def forward_derivative(solution: PrimalDualSolution, problem: ConicProblemData,
                       dA=None, db=None, dc=None, ridge: float | None = None):
    """Directional derivative ``(dx, dy, ds)`` of the solution map."""
    dA, db, dc = _check_dims(problem, dA, db, dc)
    n = problem.A.shape[1]
    rj = residual_jacobian(EmbeddingPoint.from_solution(solution), problem)
    dN = rj.apply_data(dA, db, dc)
    if not np.any(dN):
        m = problem.A.shape[0]
        return np.zeros(n), np.zeros(m), np.zeros(m)
    dz = _lstsq(rj.J_z, -dN, ridge)
    du, dv = dz[:n], dz[n:]
    dy = rj.J_pi @ dv
    return du, dy, dy - dv


def adjoint_derivative(solution: PrimalDualSolution, problem: ConicProblemData,
                       dx=None, dy=None, ds=None, ridge: float | None = None):
    """Adjoint product: returns ``(dA, db, dc)`` with
    ``<(dA, db, dc), (DA, Db, Dc)> = <(dx, dy, ds), forward(DA, Db, Dc)>``."""
    m, n = problem.A.shape
    dx = np.zeros(n) if dx is None else np.asarray(dx, float)
    dy = np.zeros(m) if dy is None else np.asarray(dy, float)
    ds = np.zeros(m) if ds is None else np.asarray(ds, float)
    if dx.shape != (n,) or dy.shape != (m,) or ds.shape != (m,):
        raise ValueError("seed dimensions do not match the problem")
    rj = residual_jacobian(EmbeddingPoint.from_solution(solution), problem)
    gz = np.concatenate([dx, rj.J_pi.T @ (dy + ds) - ds])
    if not np.any(gz):
        return np.zeros((m, n)), np.zeros(m), np.zeros(n)
    w = _lstsq(rj.J_z.T, -gz, ridge)
    wu, wv = w[:n], w[n:]
    dA = np.outer(rj.y, wu) - np.outer(wv, rj.x)
    return dA, wv.copy(), wu.copy()
