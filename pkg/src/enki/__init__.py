"""Iterative ensemble Kalman inversion with moment-matched resampling."""

from .core import Divisor, ObservationSpec
from .estimator import EnsembleKalmanInversion
from .problems import ForwardModel, ProblemInstance, gaussian_bumps_problem, get_problem, linear_problem
from .resampling import MomentMatchedResampler, ResamplingPolicy
from .solver import SolverConfig, SolverResult, Status, run

__version__ = "0.1.0"

__all__ = [
    "Divisor",
    "ObservationSpec",
    "EnsembleKalmanInversion",
    "ForwardModel",
    "ProblemInstance",
    "gaussian_bumps_problem",
    "get_problem",
    "linear_problem",
    "MomentMatchedResampler",
    "ResamplingPolicy",
    "SolverConfig",
    "SolverResult",
    "Status",
    "run",
]
