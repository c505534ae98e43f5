import itertools

import numpy as np
import pytest

from otdro.cones import ConeSpec, nonneg, soc, zero
from otdro.conic_solver import ConicProblemData
from otdro.problems import BUILDER_ORDER, BuilderId, DatasetView, build
from otdro.transport import DiscreteDistribution, GaussianMoments, TransportParam

# nonconvexity witnesses: (P, Q, L1, L2, (value at L1, at L2, at midpoint))
GOLDEN_D1 = (
    DiscreteDistribution([[0.7, 0.4], [1.7, 1.0]], [0.4, 0.6]),
    DiscreteDistribution([[1.8, 0.1], [0.5, 1.4]], [0.5, 0.5]),
    np.array([[1.0, 0.0], [0.5, 0.5]]), np.array([[0.5, 0.0], [1.0, 1.0]]),
    (0.6203, 0.5036, 0.6820),
)
GOLDEN_D2 = (
    DiscreteDistribution([[1.2, 1.9], [0.1, 0.1]], [0.6, 0.4]),
    DiscreteDistribution([[0.2, 1.4], [1.4, 0.3]], [0.6, 0.4]),
    np.array([[1.0, 0.0], [0.5, 0.5]]), np.array([[0.5, 0.0], [1.0, 0.5]]),
    (1.0578, 0.9646, 1.1433),
)
GOLDEN_G = (
    GaussianMoments([1.0, 0.6], np.diag([0.1, 1.0])),
    GaussianMoments([0.8, 0.6], np.diag([10.0, 1.0])),
    np.array([[0.2, 0.0], [0.2, 1.9]]), np.array([[0.6, 0.0], [0.8, 0.5]]),
    (0.5675, 1.3142, 1.0636),
)
GOLDEN_G2 = (
    GaussianMoments([0.4, 0.6], np.diag([0.1, 1.0])),
    GaussianMoments([0.4, 0.4], np.diag([10.0, 1.0])),
    np.array([[0.7, 0.0], [0.4, 1.9]]), np.array([[0.9, 0.0], [0.9, 0.6]]),
    (3.9720, 4.4900, 4.4865),
)

ALL_BUILDERS = tuple(BuilderId)


def random_L(rng, d, spread=0.3):
    L = np.tril(rng.uniform(-spread, spread, (d, d)), -1)
    return L + np.diag(rng.uniform(0.5, 1.5, d))


def random_instance(bid, rng, k=None, J=None, eps=None, L=None, gamma=0.05):
    """A random valid instance of one builder with its data."""
    bid = BuilderId(bid)
    k = k or int(rng.integers(2, 6))
    J = J or int(rng.integers(5, 51))
    if bid in (BuilderId.REGRESSION_ABS, BuilderId.REGRESSION_SQ):
        X = rng.normal(size=(J, k))
        y = X @ rng.normal(size=k) + rng.normal(scale=0.5, size=J)
        samples = np.column_stack([X, y])
    else:
        samples = rng.normal(0.05, 0.3, (J, k)) + rng.uniform(-0.2, 0.2, k)
    d = samples.shape[1]
    param = TransportParam(random_L(rng, d) if L is None else L, BUILDER_ORDER[bid])
    eps = float(rng.uniform(0.05, 0.5)) if eps is None else eps
    ref = (GaussianMoments.from_samples(samples) if bid is BuilderId.PORTFOLIO_GAUSSIAN
           else DatasetView(samples))
    return build(bid, ref, eps, param, gamma), ref, param


def random_conic(rng, n=None, m_blocks=None):
    """A random feasible conic program with a unique, strictly complementary solution.

    The number of variables equals the number of active constraint directions
    (zero rows, active orthant rows, one for the second-order cone boundary),
    so the residual Jacobian is generically nonsingular. Passing ``n`` or
    ``m_blocks`` drops that guarantee.
    """
    from otdro.cones import project_primal
    z, q, r = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    active = int(rng.integers(1, q + 1))
    wq = np.abs(rng.normal(size=q)) + 0.1
    wq[rng.permutation(q)[:active]] *= -1
    direction = rng.normal(size=r - 1)
    # ||x|| > |t| puts both projections on the cone boundary
    ws = np.r_[rng.uniform(-0.8, 0.8), direction / np.linalg.norm(direction) * rng.uniform(1, 2)]
    w = np.concatenate([rng.normal(size=z), wq, ws])
    spec = ConeSpec(m_blocks or [zero(z), nonneg(q), soc(r)])
    if m_blocks is not None:
        w = rng.normal(size=spec.total_dim)
    n = n or (z + active + 1)
    s0 = project_primal(spec, w)
    y0 = s0 - w
    A = rng.normal(size=(spec.total_dim, n))
    x0 = rng.normal(size=n)
    return ConicProblemData(A, A @ x0 + s0, -A.T @ y0, spec)


def vertex_enumeration(C, p, q):
    """Cheapest basic feasible plan of the transportation polytope."""
    I, J = C.shape
    rows = np.vstack([np.kron(np.eye(I), np.ones((1, J))), np.kron(np.ones((1, I)), np.eye(J))])
    rhs = np.concatenate([p, q])
    rank = I + J - 1
    best = np.inf
    for basis in itertools.combinations(range(I * J), rank):
        B = rows[:, basis]
        if np.linalg.matrix_rank(B) < rank:
            continue
        xb = np.linalg.lstsq(B, rhs, rcond=None)[0]
        if np.min(xb) < -1e-12 or np.linalg.norm(B @ xb - rhs) > 1e-10:
            continue
        best = min(best, float(C.ravel()[list(basis)] @ xb))
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
