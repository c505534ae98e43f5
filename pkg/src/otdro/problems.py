"""Standard-form conic data for the robust portfolio and regression problems.

Each builder returns a :class:`ProblemInstance` that records where every
variable block lives in ``x`` and where the factor ``L`` sits inside ``A``.
That location is the only place the data depend on ``L``, so gradients with
respect to ``L`` are read off the adjoint ``dA`` directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import ndtri

from .cones import ConeSpec, nonneg, soc, zero
from .conic_solver import ConicProblemData
from .transport import GaussianMoments, TransportParam, sqrtm_psd


class BuilderId(str, Enum):
    PORTFOLIO_T1 = "portfolio_t1"
    PORTFOLIO_T2 = "portfolio_t2"
    PORTFOLIO_GAUSSIAN = "portfolio_gaussian"
    REGRESSION_ABS = "regression_abs"
    REGRESSION_SQ = "regression_sq"


# transport order p used by each reformulation
BUILDER_ORDER = {
    BuilderId.PORTFOLIO_T1: 1,
    BuilderId.PORTFOLIO_T2: 2,
    BuilderId.PORTFOLIO_GAUSSIAN: 2,
    BuilderId.REGRESSION_ABS: 1,
    BuilderId.REGRESSION_SQ: 2,
}


class BuilderMismatch(ValueError):
    pass


class ZeroRadius(ValueError):
    pass


@dataclass(frozen=True)
class DatasetView:
    samples: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.samples, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        if S.shape[0] < 1 or not np.all(np.isfinite(S)):
            raise ValueError("dataset must have at least one finite row")
        object.__setattr__(self, "samples", S)

    @property
    def J(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    # regression split: features first, response last
    @property
    def X(self) -> np.ndarray:
        return self.samples[:, :-1]

    @property
    def y(self) -> np.ndarray:
        return self.samples[:, -1]


@dataclass(frozen=True)
class ProblemInstance:
    conic: ConicProblemData
    variable_map: dict
    builder_id: BuilderId
    theta_shape: tuple[int, int]
    L_rows: slice
    L_cols: slice
    eps: float
    meta: dict = field(default_factory=dict)

    def block(self, x: np.ndarray, name: str) -> np.ndarray:
        return np.asarray(x)[self.variable_map[name]]

    def decision(self, x: np.ndarray) -> np.ndarray:
        """The decision ``w`` (portfolio weights or regression coefficients)."""
        if self.builder_id is BuilderId.REGRESSION_SQ:
            v = self.block(x, "v")
            return -v[:-1]
        return self.block(x, "w").copy()

    def robust_value(self, objective: float) -> float:
        """Worst-case objective from the conic optimal value ``c^T x*``."""
        if self.builder_id is BuilderId.REGRESSION_SQ:
            return float(objective) ** 2
        return float(objective)


def _validate(eps: float, param: TransportParam, d: int, p: int):
    if not (np.isfinite(eps) and eps >= 0):
        raise ValueError(f"radius must be finite and nonnegative, got {eps}")
    if param.dim != d:
        raise ValueError(f"L has dimension {param.dim}, expected {d}")
    if param.p != p:
        raise ValueError(f"this reformulation needs transport order {p}, got {param.p}")


def _slices(sizes: list[tuple[str, int]]) -> dict:
    out, start = {}, 0
    for name, size in sizes:
        out[name] = slice(start, start + size)
        start += size
    return out


def build_portfolio_type1(data: DatasetView, eps: float, param: TransportParam
                          ) -> ProblemInstance:
    k = data.d
    _validate(eps, param, k, 1)
    vm = _slices([("w", k), ("lam", 1), ("u", k)])
    n = 2 * k + 1
    m = 1 + k + k + 1 + k
    A = np.zeros((m, n))
    w, lam, u = vm["w"], vm["lam"], vm["u"]
    A[0, w] = 1.0
    r = slice(1, 1 + k)
    A[r, w] = -np.eye(k)
    A[r, u] = param.L
    A[1 + k:1 + 2 * k, w] = -np.eye(k)
    A[1 + 2 * k, lam] = -1.0
    A[2 + 2 * k:, u] = -np.eye(k)
    b = np.zeros(m)
    b[0] = 1.0
    c = np.concatenate([-data.samples.mean(axis=0), [eps], np.zeros(k)])
    cone = ConeSpec([zero(1), zero(k), nonneg(k), soc(k + 1)])
    return ProblemInstance(ConicProblemData(A, b, c, cone), vm, BuilderId.PORTFOLIO_T1,
                           (k, 1), r, u, float(eps))


def build_portfolio_type2(data: DatasetView, eps: float, param: TransportParam
                          ) -> ProblemInstance:
    k, J = data.d, data.J
    _validate(eps, param, k, 2)
    vm = _slices([("t", J), ("w", k), ("lam", 1), ("z", k)])
    t, w, lam, z = vm["t"], vm["w"], vm["lam"], vm["z"]
    n = J + 2 * k + 1
    head = 1 + k + k + 1
    m = head + J * (k + 2)
    A = np.zeros((m, n))
    A[0, w] = 1.0
    r = slice(1, 1 + k)
    A[r, w] = -np.eye(k)
    A[r, z] = param.L
    A[1 + k:1 + 2 * k, w] = -np.eye(k)
    A[1 + 2 * k, lam] = -1.0
    tcol = np.arange(n)[t]
    lcol = lam.start
    for j in range(J):
        r0 = head + j * (k + 2)
        A[r0, tcol[j]] = -1.0
        A[r0, lcol] = -4.0
        A[r0 + 1:r0 + 1 + k, z] = -2.0 * np.eye(k)
        A[r0 + k + 1, tcol[j]] = 1.0
        A[r0 + k + 1, lcol] = -4.0
    b = np.zeros(m)
    b[0] = 1.0
    c = np.concatenate([np.full(J, 1.0 / J), -data.samples.mean(axis=0), [eps ** 2],
                        np.zeros(k)])
    cone = ConeSpec([zero(1 + k), nonneg(k + 1)] + [soc(k + 2)] * J)
    return ProblemInstance(ConicProblemData(A, b, c, cone), vm, BuilderId.PORTFOLIO_T2,
                           (k, 2), r, z, float(eps))


def risk_coefficient(gamma: float) -> float:
    """Gaussian CVaR constant ``phi(Phi^-1(1 - gamma)) / gamma``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"tail level must lie in (0, 1), got {gamma}")
    q = ndtri(1.0 - gamma)
    return float(np.exp(-0.5 * q * q) / np.sqrt(2.0 * np.pi) / gamma)


def build_portfolio_gaussian(mom: GaussianMoments, eps: float, gamma: float,
                             param: TransportParam) -> ProblemInstance:
    k = mom.dim
    _validate(eps, param, k, 2)
    alpha = risk_coefficient(gamma)
    vm = _slices([("w", k), ("u", 1), ("v", 1), ("q", k)])
    w, u, v, q = vm["w"], vm["u"], vm["v"], vm["q"]
    n = 2 * k + 2
    m = 1 + k + k + (k + 1) + (k + 1)
    A = np.zeros((m, n))
    A[0, w] = 1.0
    r = slice(1, 1 + k)
    A[r, w] = -np.eye(k)
    A[r, q] = param.L
    A[1 + k:1 + 2 * k, w] = -np.eye(k)
    o = 1 + 2 * k
    A[o, u] = -1.0
    A[o + 1:o + 1 + k, w] = -sqrtm_psd(mom.cov)
    o += k + 1
    A[o, v] = -1.0
    A[o + 1:, q] = -np.eye(k)
    b = np.zeros(m)
    b[0] = 1.0
    c = np.concatenate([-mom.mean, [alpha, eps * np.sqrt(1.0 + alpha ** 2)], np.zeros(k)])
    cone = ConeSpec([zero(k + 1), nonneg(k), soc(k + 1), soc(k + 1)])
    return ProblemInstance(ConicProblemData(A, b, c, cone), vm, BuilderId.PORTFOLIO_GAUSSIAN,
                           (k, 2), r, q, float(eps), {"alpha": alpha, "gamma": gamma})


def build_linreg_abs(data: DatasetView, eps: float, param: TransportParam) -> ProblemInstance:
    J, d = data.J, data.d
    k = d - 1
    _validate(eps, param, d, 1)
    X, y = data.X, data.y
    vm = _slices([("v", J), ("u", 1), ("z", d), ("w", k)])
    v, u, z, w = vm["v"], vm["u"], vm["z"], vm["w"]
    n = J + 1 + d + k
    m = d + 2 * J + d + 1
    A = np.zeros((m, n))
    r = slice(0, d)
    A[r, z] = param.L
    A[:k, w] = np.eye(k)
    A[d:d + J, v] = -np.eye(J)
    A[d:d + J, w] = -X
    A[d + J:d + 2 * J, v] = -np.eye(J)
    A[d + J:d + 2 * J, w] = X
    o = d + 2 * J
    A[o, u] = -1.0
    A[o + 1:, z] = -np.eye(d)
    b = np.zeros(m)
    b[d - 1] = 1.0
    b[d:d + J] = -y
    b[d + J:d + 2 * J] = y
    c = np.concatenate([np.full(J, 1.0 / J), [eps], np.zeros(d + k)])
    cone = ConeSpec([zero(d), nonneg(J), nonneg(J), soc(d + 1)])
    return ProblemInstance(ConicProblemData(A, b, c, cone), vm, BuilderId.REGRESSION_ABS,
                           (d, 1), r, z, float(eps))


def build_linreg_sq(data: DatasetView, eps: float, param: TransportParam) -> ProblemInstance:
    J, d = data.J, data.d
    _validate(eps, param, d, 2)
    vm = _slices([("v", d), ("lam", 1), ("a", J), ("z", 1), ("q", d)])
    v, lam, a, z, q = vm["v"], vm["lam"], vm["a"], vm["z"], vm["q"]
    n = 2 * d + J + 2
    m = d + 1 + J + (J + 1) + (d + 1)
    A = np.zeros((m, n))
    r = slice(0, d)
    A[r, v] = -np.eye(d)
    A[r, q] = param.L
    A[d, v.stop - 1] = 1.0
    A[d + 1:d + 1 + J, v] = data.samples
    A[d + 1:d + 1 + J, a] = -np.eye(J)
    o = d + 1 + J
    A[o, lam] = -1.0
    A[o + 1:o + 1 + J, a] = -np.eye(J)
    o += J + 1
    A[o, z] = -1.0
    A[o + 1:, q] = -np.eye(d)
    b = np.zeros(m)
    b[d] = 1.0
    c = np.concatenate([np.zeros(d), [1.0 / np.sqrt(J)], np.zeros(J), [eps], np.zeros(d)])
    cone = ConeSpec([zero(d + 1 + J), soc(J + 1), soc(d + 1)])
    return ProblemInstance(ConicProblemData(A, b, c, cone), vm, BuilderId.REGRESSION_SQ,
                           (d, 2), r, q, float(eps))


def build(builder_id: BuilderId | str, reference, eps: float, param: TransportParam,
          gamma: float | None = None) -> ProblemInstance:
    """Dispatch on ``builder_id``; ``reference`` is a DatasetView or GaussianMoments."""
    bid = BuilderId(builder_id)
    if bid is BuilderId.PORTFOLIO_GAUSSIAN:
        if not isinstance(reference, GaussianMoments):
            raise BuilderMismatch("the Gaussian portfolio needs GaussianMoments")
        return build_portfolio_gaussian(reference, eps, gamma, param)
    if not isinstance(reference, DatasetView):
        raise BuilderMismatch(f"{bid.value} needs a DatasetView")
    fn = {BuilderId.PORTFOLIO_T1: build_portfolio_type1,
          BuilderId.PORTFOLIO_T2: build_portfolio_type2,
          BuilderId.REGRESSION_ABS: build_linreg_abs,
          BuilderId.REGRESSION_SQ: build_linreg_sq}[bid]
    return fn(reference, eps, param)


def parameter_gradient(instance: ProblemInstance, adjoint, L=None) -> np.ndarray:
    """Contract an adjoint triple ``(dA, db, dc)`` with the L-dependence of ``A``.

    ``L`` enters ``A`` linearly and only in the block ``A[L_rows, L_cols]``,
    so the gradient is that block of ``dA`` restricted to the lower triangle.
    """
    dA, db, dc = adjoint
    dA = np.asarray(dA, dtype=float)
    if dA.shape != instance.conic.A.shape:
        raise BuilderMismatch("adjoint shape does not match the instance")
    d = instance.theta_shape[0]
    if L is not None and np.asarray(L).shape != (d, d):
        raise BuilderMismatch("L shape does not match the instance")
    return np.tril(dA[instance.L_rows, instance.L_cols])


def _minv_norm(v, L):
    # ||v||_{(L L^T)^-1} = ||L^-1 v||
    from scipy.linalg import solve_triangular
    return float(np.linalg.norm(solve_triangular(L, v, lower=True)))


def closed_form_gaussian_objective(w, mom: GaussianMoments, eps: float, gamma: float,
                                   param: TransportParam) -> float:
    w = np.asarray(w, dtype=float)
    alpha = risk_coefficient(gamma)
    return float(-mom.mean @ w + alpha * np.sqrt(max(w @ mom.cov @ w, 0.0))
                 + eps * np.sqrt(1 + alpha ** 2) * _minv_norm(w, param.L))


def closed_form_linreg_abs(w, data: DatasetView, eps: float, param: TransportParam) -> float:
    th = np.append(-np.asarray(w, dtype=float), 1.0)
    return float(np.mean(np.abs(data.samples @ th)) + eps * _minv_norm(th, param.L))


def closed_form_linreg_sq(w, data: DatasetView, eps: float, param: TransportParam) -> float:
    th = np.append(-np.asarray(w, dtype=float), 1.0)
    rmse = np.sqrt(np.mean((data.samples @ th) ** 2))
    return float((rmse + eps * _minv_norm(th, param.L)) ** 2)


def worst_case_moments(w, mom: GaussianMoments, rho: float, gamma: float,
                       param: TransportParam) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance attaining the robust Gaussian CVaR at decision ``w``."""
    w = np.asarray(w, dtype=float)
    if rho == 0:
        return mom.mean.copy(), mom.cov.copy()
    if rho < 0:
        raise ZeroRadius("radius must be positive")
    if not np.any(w):
        raise ValueError("decision must be nonzero")
    alpha = risk_coefficient(gamma)
    L = param.L
    M = np.linalg.inv(L @ L.T)
    Mw = M @ w
    qn = float(w @ Mw)
    nw = np.sqrt(qn)
    k1 = np.sqrt(1.0 + alpha ** 2)
    mu = mom.mean - rho / (k1 * nw) * Mw
    g_star = k1 * nw / (2.0 * rho)
    sig = np.sqrt(w @ mom.cov @ w)
    l_star = 1.0 / (qn / g_star + 2.0 * sig / alpha)
    coef = l_star / (g_star - l_star * qn)
    T = np.eye(w.size) + coef * np.outer(Mw, w)
    S = T @ mom.cov @ T.T
    return mu, 0.5 * (S + S.T)
