"""Mahalanobis-type transport distances and their gradients in the Cholesky factor L.

The transport cost between two points is ``||L^T (x1 - x2)||^p``. For discrete
distributions the distance is the p-th root of the optimal transport LP value;
for mean-covariance pairs it is the Gelbrich closed form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cones import ConeSpec, nonneg, zero
from .conic_solver import ConicProblemData, SolverSettings, solve_or_raise

log = logging.getLogger(__name__)

COV_RIDGE = 1e-10


class NonFinite(ValueError):
    pass


class NonSymmetric(ValueError):
    pass


class SingularPencil(np.linalg.LinAlgError):
    pass


class SingularSqrt(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TransportParam:
    L: np.ndarray
    p: int = 1

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError(f"L must be square, got shape {L.shape}")
        if not np.all(np.isfinite(L)):
            raise NonFinite("L contains NaN or Inf")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("L must be lower-triangular")
        if np.any(np.diag(L) <= 0):
            raise ValueError("L must have a strictly positive diagonal")
        if int(self.p) < 1:
            raise ValueError("order p must be >= 1")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "p", int(self.p))

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    @classmethod
    def identity(cls, d: int, p: int = 1) -> "TransportParam":
        return cls(np.eye(d), p)


@dataclass(frozen=True)
class DiscreteDistribution:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights have different lengths")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise NonFinite("distribution contains NaN or Inf")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def empirical(cls, samples) -> "DiscreteDistribution":
        samples = np.asarray(samples, dtype=float)
        n = samples.shape[0]
        return cls(samples, np.full(n, 1.0 / n))


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=float).ravel()
        S = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if S.shape != (mu.size, mu.size):
            raise ValueError("mean and covariance dimensions differ")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(S))):
            raise NonFinite("moments contain NaN or Inf")
        if np.max(np.abs(S - S.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(S))):
            raise NonSymmetric("covariance is not symmetric")
        S = 0.5 * (S + S.T)
        lam, V = np.linalg.eigh(S)
        if lam.min() < -1e-10:
            raise ValueError(f"covariance has negative eigenvalue {lam.min():.3e}")
        if lam.min() < 0:
            S = (V * np.maximum(lam, 0.0)) @ V.T
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", S)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_samples(cls, samples, ridge: float = 1e-6) -> "GaussianMoments":
        """Empirical mean and (biased, ddof=0) covariance plus a ridge."""
        X = np.asarray(samples, dtype=float)
        mu = X.mean(axis=0)
        C = X - mu
        S = C.T @ C / X.shape[0]
        return cls(mu, 0.5 * (S + S.T) + ridge * np.eye(X.shape[1]))


def mahalanobis_cost(x1, x2, param: TransportParam) -> float:
    x1, x2 = np.asarray(x1, float).ravel(), np.asarray(x2, float).ravel()
    if x1.shape != x2.shape or x1.size != param.dim:
        raise ValueError("point dimensions do not match L")
    return float(np.linalg.norm(param.L.T @ (x1 - x2)) ** param.p)


def cost_matrix(P: DiscreteDistribution, Q: DiscreteDistribution,
                param: TransportParam) -> np.ndarray:
    if P.dim != Q.dim or P.dim != param.dim:
        raise ValueError("distribution dimensions do not match L")
    diff = P.points[:, None, :] - Q.points[None, :, :]
    return np.linalg.norm(diff @ param.L, axis=2) ** param.p


def transport_lp(P: DiscreteDistribution, Q: DiscreteDistribution, C: np.ndarray
                 ) -> ConicProblemData:
    """Standard-form transport LP over the row-major plan ``pi`` (I*J entries).

    The last column-marginal equality is implied by the others and dropped.
    """
    I, J = C.shape
    rows = np.kron(np.eye(I), np.ones((1, J)))
    cols = np.kron(np.ones((1, I)), np.eye(J))[:-1]
    A = np.vstack([rows, cols, -np.eye(I * J)])
    b = np.concatenate([P.weights, Q.weights[:-1], np.zeros(I * J)])
    cone = ConeSpec([zero(I + J - 1), nonneg(I * J)])
    return ConicProblemData(A, b, C.ravel(), cone)


def _uniform(D: DiscreteDistribution) -> bool:
    n = D.weights.size
    return bool(np.all(D.weights == D.weights[0])) and abs(D.weights[0] * n - 1.0) < 1e-12


def optimal_plan(P: DiscreteDistribution, Q: DiscreteDistribution,
                 param: TransportParam, settings: SolverSettings | None = None
                 ) -> tuple[float, np.ndarray]:
    """Optimal value of the transport LP (the p-th power of the distance) and a plan."""
    C = cost_matrix(P, Q, param)
    I, J = C.shape
    if I == J and _uniform(P) and _uniform(Q):
        # uniform equal-size marginals: an optimal vertex is a permutation
        r, c = linear_sum_assignment(C)
        plan = np.zeros_like(C)
        plan[r, c] = 1.0 / I
        return float(C[r, c].sum() / I), plan
    sol = solve_or_raise(transport_lp(P, Q, C), settings)
    plan = np.maximum(sol.x.reshape(I, J), 0.0)
    return float(C.ravel() @ sol.x), plan


def discrete_distance(P: DiscreteDistribution, Q: DiscreteDistribution,
                      param: TransportParam) -> float:
    val, _ = optimal_plan(P, Q, param)
    return max(val, 0.0) ** (1.0 / param.p)


def discrete_distance_gradient(P: DiscreteDistribution, Q: DiscreteDistribution,
                               param: TransportParam, value: bool = False):
    """Envelope gradient of the distance in L (lower-triangular part).

    Pairs with zero cost contribute a zero term. With ``value=True`` returns
    ``(distance, gradient)``.
    """
    val, plan = optimal_plan(P, Q, param)
    p, L = param.p, param.L
    dist = max(val, 0.0) ** (1.0 / p)
    if val <= 0.0:
        G = np.zeros_like(L)
    else:
        i, j = np.nonzero(plan > 0)
        delta = P.points[i] - Q.points[j]
        proj = delta @ L
        nrm = np.linalg.norm(proj, axis=1)
        keep = nrm > 0.0
        # d ||L^T d||^p / dL = p ||L^T d||^(p-2) d d^T L
        coef = plan[i[keep], j[keep]] * p * nrm[keep] ** (p - 2)
        G = (delta[keep] * coef[:, None]).T @ proj[keep]
        G *= val ** (1.0 / p - 1.0) / p
    G = np.tril(G)
    return (dist, G) if value else G


def sqrtm_psd(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if np.max(np.abs(M - M.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(M), initial=0.0)):
        raise NonSymmetric("matrix is not symmetric")
    lam, V = np.linalg.eigh(0.5 * (M + M.T))
    lam = np.where(lam < 1e-12, np.maximum(lam, 0.0), lam)
    R = (V * np.sqrt(lam)) @ V.T
    return 0.5 * (R + R.T)


def lyapunov_solve(S, RHS) -> np.ndarray:
    """Solve ``X S + S X = RHS`` for symmetric positive definite ``S``."""
    S = np.asarray(S, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    denom = lam[:, None] + lam[None, :]
    if denom.min() <= 1e-12:
        raise SingularPencil(f"Lyapunov operator is singular (min eigen-sum {denom.min():.2e})")
    Rt = V.T @ np.asarray(RHS, dtype=float) @ V
    return V @ (Rt / denom) @ V.T


def _check_pair(a: GaussianMoments, b: GaussianMoments, param: TransportParam):
    if a.dim != b.dim or a.dim != param.dim:
        raise ValueError("moment dimensions do not match L")


def _gelbrich_sq(a: GaussianMoments, b: GaussianMoments, L: np.ndarray):
    # a plays the role of P, b of Q
    dmu = b.mean - a.mean
    H = L @ L.T
    B = sqrtm_psd(a.cov)
    H2 = B @ H @ b.cov @ H @ B
    S = sqrtm_psd(0.5 * (H2 + H2.T))
    val = (np.sum((L.T @ dmu) ** 2) + np.trace((a.cov + b.cov) @ H)
           - 2.0 * np.trace(S))
    return val, dmu, H, B, S


def gelbrich_distance(a: GaussianMoments, b: GaussianMoments, param: TransportParam) -> float:
    _check_pair(a, b, param)
    val = _gelbrich_sq(a, b, param.L)[0]
    if not np.isfinite(val):
        raise NonFinite("Gelbrich distance is not finite")
    return float(np.sqrt(max(val, 0.0)))


def gelbrich_gradient(a: GaussianMoments, b: GaussianMoments, param: TransportParam,
                      value: bool = False):
    """Gradient of the Gelbrich distance in L (lower-triangular part).

    Chain: ``H = L L^T``, ``H2 = (B H A)(B H A)^T`` with ``B = sqrt(Sigma_P)`` and
    ``A = sqrt(Sigma_Q)``, ``S = sqrt(H2)``, then the trace. The derivative of
    ``tr S`` in ``H2`` is the Lyapunov solution ``G`` of ``G S + S G = I``.
    """
    _check_pair(a, b, param)
    L = param.L
    d = L.shape[0]
    ar, br = _regularized(a), _regularized(b)
    h, dmu, H, B, S = _gelbrich_sq(ar, br, L)
    if not np.isfinite(h):
        raise NonFinite("Gelbrich distance is not finite")
    g = float(np.sqrt(max(h, 0.0)))
    if g <= 1e-14:
        G = np.zeros_like(L)
        return (g, G) if value else G
    try:
        Gs = lyapunov_solve(S, np.eye(d))
    except SingularPencil as exc:
        raise SingularSqrt("inner matrix square root is rank-deficient") from exc
    W = B @ Gs @ B @ H @ br.cov
    grad_H_tr = W + W.T
    C = np.outer(dmu, dmu) + ar.cov + br.cov
    # d tr S / dL = 2 grad_H L, and h carries -2 tr S
    grad_h = 2.0 * C @ L - 4.0 * grad_H_tr @ L
    grad = np.tril(grad_h / (2.0 * g))
    return (g, grad) if value else grad


def _regularized(m: GaussianMoments) -> GaussianMoments:
    if np.linalg.eigvalsh(m.cov)[0] > COV_RIDGE:
        return m
    return GaussianMoments(m.mean, m.cov + COV_RIDGE * np.eye(m.dim))


def _sqrtm_stack(M: np.ndarray):
    lam, V = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    lam = np.maximum(lam, 0.0)
    return (V * np.sqrt(lam)[..., None, :]) @ np.swapaxes(V, -1, -2), lam, V


def gelbrich_batch(base: GaussianMoments, others, param: TransportParam,
                   grad: bool = True):
    """Gelbrich distances (and L-gradients) from ``base`` to each of ``others``.

    Vectorized over the second argument; agrees with :func:`gelbrich_distance`
    and :func:`gelbrich_gradient` applied pair by pair.
    """
    others = list(others)
    for o in others:
        _check_pair(base, o, param)
    L = param.L
    d = L.shape[0]
    a = _regularized(base) if grad else base
    covs = np.stack([o.cov for o in others])
    if grad:
        lo = np.linalg.eigvalsh(covs)[:, 0]
        covs = covs + np.where(lo > COV_RIDGE, 0.0, COV_RIDGE)[:, None, None] * np.eye(d)
    dmu = np.stack([o.mean for o in others]) - a.mean
    H = L @ L.T
    B = sqrtm_psd(a.cov)
    BH = B @ H
    H2 = BH @ covs @ BH.T
    S, lam, V = _sqrtm_stack(H2)
    h = (np.sum((dmu @ L) ** 2, axis=1)
         + np.einsum("kij,ji->k", a.cov + covs, H)
         - 2.0 * np.sqrt(lam).sum(axis=1))
    if not np.all(np.isfinite(h)):
        raise NonFinite("Gelbrich distance is not finite")
    g = np.sqrt(np.maximum(h, 0.0))
    if not grad:
        return g
    root = np.sqrt(lam)
    denom = root[:, :, None] + root[:, None, :]
    if denom.min() <= 1e-12:
        raise SingularSqrt("inner matrix square root is rank-deficient")
    # Lyapunov solve G S + S G = I in each eigenbasis
    Gs = V @ (np.eye(d) / denom) @ np.swapaxes(V, -1, -2)
    W = B @ Gs @ BH @ covs
    C = dmu[:, :, None] * dmu[:, None, :] + a.cov + covs
    grad_h = 2.0 * C @ L - 4.0 * (W + np.swapaxes(W, -1, -2)) @ L
    safe = np.where(g > 1e-14, g, 1.0)
    grads = np.tril(grad_h / (2.0 * safe[:, None, None]))
    grads[g <= 1e-14] = 0.0
    return g, grads


def discrete_batch(base: DiscreteDistribution, others, param: TransportParam,
                   grad: bool = True):
    """Discrete distances (and L-gradients) from ``base`` to each of ``others``.

    Equal-size uniform pairs share one stacked cost computation and go through
    the assignment solver; any other pair falls back to the pairwise routines.
    """
    others = list(others)
    n = base.weights.size
    fast = [i for i, o in enumerate(others)
            if o.weights.size == n and o.dim == base.dim and _uniform(o)]
    if not _uniform(base) or base.dim != param.dim:
        fast = []
    vals = np.zeros(len(others))
    grads = np.zeros((len(others),) + param.L.shape)
    if fast:
        p, L = param.p, param.L
        pts = np.stack([others[i].points for i in fast])
        diff = base.points[None, :, None, :] - pts[:, None, :, :]
        proj = diff @ L
        nrm = np.linalg.norm(proj, axis=3)
        C = nrm ** p
        for k, i in enumerate(fast):
            r, c = linear_sum_assignment(C[k])
            val = float(C[k][r, c].sum() / n)
            vals[i] = max(val, 0.0) ** (1.0 / p)
            if not grad or val <= 0.0:
                continue
            keep = nrm[k][r, c] > 0.0
            delta, pr = diff[k][r, c][keep], proj[k][r, c][keep]
            coef = p * nrm[k][r, c][keep] ** (p - 2) / n
            grads[i] = np.tril((delta * coef[:, None]).T @ pr) * val ** (1.0 / p - 1.0) / p
    for i in sorted(set(range(len(others))) - set(fast)):
        if grad:
            vals[i], grads[i] = discrete_distance_gradient(base, others[i], param, value=True)
        else:
            vals[i] = discrete_distance(base, others[i], param)
    return (vals, grads) if grad else vals
