"""Learned optimal-transport ambiguity sets via a differentiable conic layer."""
from .conic_diff import adjoint_derivative, forward_derivative
from .conic_solver import ConicProblemData, PrimalDualSolution, SolverSettings, Status, solve
from .cones import ConeSpec, nonneg, soc, zero
from .coverage import bootstrap, calibrate_epsilon, penalty_gradient, penalty_value
from .problems import BuilderId, DatasetView, build
from .trainer import TrainConfig, TrainTrace, train
from .transport import (DiscreteDistribution, GaussianMoments, TransportParam,
                        discrete_distance, gelbrich_distance)

__all__ = [
    "BuilderId", "ConeSpec", "ConicProblemData", "DatasetView", "DiscreteDistribution",
    "GaussianMoments", "PrimalDualSolution", "SolverSettings", "Status", "TrainConfig",
    "TrainTrace", "TransportParam", "adjoint_derivative", "bootstrap", "build",
    "calibrate_epsilon", "discrete_distance", "forward_derivative", "gelbrich_distance",
    "nonneg", "penalty_gradient", "penalty_value", "soc", "solve", "train", "zero",
]
