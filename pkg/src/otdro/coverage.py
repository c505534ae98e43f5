"""Bootstrap replicas, radius calibration and the smoothed coverage penalty."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .transport import (DiscreteDistribution, GaussianMoments, TransportParam, discrete_batch,
                        gelbrich_batch)

MOMENT_RIDGE = 1e-6


class BootstrapMode(str, Enum):
    DISCRETE = "discrete"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class BootstrapSet:
    mode: BootstrapMode
    replicas: tuple
    seed: int

    @property
    def n_b(self) -> int:
        return len(self.replicas)


@dataclass(frozen=True)
class PenaltyConfig:
    beta: float
    lam_p: float = 10.0
    eta_p: float = 100.0
    eps: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.lam_p < 0 or self.eta_p <= 0 or self.eps <= 0:
            raise ValueError("need lam_p >= 0, eta_p > 0 and eps > 0")


def replica_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent PCG64 streams, one per replica, spawned from ``seed``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def base_distribution(samples: np.ndarray, mode: BootstrapMode | str):
    samples = np.asarray(samples, dtype=float)
    if BootstrapMode(mode) is BootstrapMode.GAUSSIAN:
        return GaussianMoments.from_samples(samples, MOMENT_RIDGE)
    return DiscreteDistribution.empirical(samples)


def bootstrap(samples, n_b: int, mode: BootstrapMode | str, seed: int) -> BootstrapSet:
    """Resample the rows of ``samples`` with replacement, ``n_b`` times."""
    if n_b < 1:
        raise ValueError("n_b must be >= 1")
    samples = np.asarray(getattr(samples, "samples", samples), dtype=float)
    mode = BootstrapMode(mode)
    J = samples.shape[0]
    reps = []
    for rng in replica_streams(seed, n_b):
        idx = rng.integers(0, J, size=J)
        reps.append(base_distribution(samples[idx], mode))
    return BootstrapSet(mode, tuple(reps), int(seed))


def calibrate_epsilon(distances, beta: float) -> float:
    """The ``ceil((1 - beta) n_b)``-th smallest distance."""
    d = np.sort(np.asarray(distances, dtype=float).ravel())
    if d.size == 0:
        raise ValueError("no distances to calibrate on")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    # guard against 0.9 * 20 = 18.000000000000004
    r = math.ceil(round((1.0 - beta) * d.size, 9))
    return float(d[min(max(r, 1), d.size) - 1])


def sigmoid(x, eta_p: float):
    return expit(eta_p * np.asarray(x, dtype=float))


def replica_distances(param: TransportParam, base, boots: BootstrapSet,
                      grad: bool = False):
    """Distances from ``base`` to each replica; with ``grad`` also their L-gradients."""
    if isinstance(base, GaussianMoments):
        return gelbrich_batch(base, boots.replicas, param, grad)
    return discrete_batch(base, boots.replicas, param, grad)


def _value(d, cfg: PenaltyConfig) -> float:
    return float(np.mean(sigmoid(d / cfg.eps - 1.0, cfg.eta_p)) - cfg.beta)


def _jacobian(d, grads, cfg: PenaltyConfig) -> np.ndarray:
    s = sigmoid(d / cfg.eps - 1.0, cfg.eta_p)
    ds = cfg.eta_p * s * (1.0 - s)
    return np.tensordot(ds, grads, axes=1) / (d.size * cfg.eps)


def penalty_value(param: TransportParam, base, boots: BootstrapSet, cfg: PenaltyConfig) -> float:
    return _value(replica_distances(param, base, boots), cfg)


def penalty_gradient(param: TransportParam, base, boots: BootstrapSet,
                     cfg: PenaltyConfig) -> np.ndarray:
    """Jacobian ``J_e`` of the coverage violation in L (not yet gated or scaled)."""
    d, g = replica_distances(param, base, boots, grad=True)
    return _jacobian(d, g, cfg)


def penalty_terms(param: TransportParam, base, boots: BootstrapSet, cfg: PenaltyConfig):
    """``(e, J_e, distances)`` from a single pass over the replicas."""
    d, g = replica_distances(param, base, boots, grad=True)
    return _value(d, cfg), _jacobian(d, g, cfg), d


def penalty_term_gradient(e: float, J_e: np.ndarray, cfg: PenaltyConfig) -> np.ndarray:
    """Gradient of ``lam_p * max(0, e)^2``."""
    return 2.0 * cfg.lam_p * max(0.0, e) * J_e
