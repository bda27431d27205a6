"""Scikit-learn style front end to the solver."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .problems import ProblemInstance
from .resampling import ResamplingPolicy
from .solver import SolverConfig, run


class EnsembleKalmanInversion(BaseEstimator):
    """Iterative ensemble Kalman inversion of a :class:`ProblemInstance`.

    Parameters mirror :class:`~enki.solver.SolverConfig`; ``resampling`` takes
    the string form ``"off"``, ``"uniform"``, ``"gaussian"`` or ``"laplace"``.

    Attributes
    ----------
    theta_ : ndarray of shape (d_theta,)
        Posterior ensemble mean at the last iteration.
    status_ : Status
    n_iter_ : int
    trace_ : list of IterationRecord
    steady_state_ : SteadyStateReport
    result_ : SolverResult

    Examples
    --------
    >>> from enki import linear_problem
    >>> est = EnsembleKalmanInversion(n_members=200, tol=1e-6, random_state=0)
    >>> est.fit(linear_problem(gamma=0.01)).status_.value
    'converged_innovation'
    """

    def __init__(
        self,
        n_members=100,
        tol=1e-4,
        max_iter=5000,
        resampling="off",
        rank_tol=1e-12,
        fixed_perturbations=False,
        perturb_observations=True,
        update_only=False,
        covariance_divisor="population",
        stagnation_window=50,
        stagnation_gain_eps=1e-9,
        random_state=0,
    ):
        self.n_members = n_members
        self.tol = tol
        self.max_iter = max_iter
        self.resampling = resampling
        self.rank_tol = rank_tol
        self.fixed_perturbations = fixed_perturbations
        self.perturb_observations = perturb_observations
        self.update_only = update_only
        self.covariance_divisor = covariance_divisor
        self.stagnation_window = stagnation_window
        self.stagnation_gain_eps = stagnation_gain_eps
        self.random_state = random_state

    def _config(self) -> SolverConfig:
        return SolverConfig(
            n_members=self.n_members,
            tol=self.tol,
            max_iter=self.max_iter,
            seed=0 if self.random_state is None else int(self.random_state),
            resampling=ResamplingPolicy.from_string(self.resampling, self.rank_tol),
            fixed_perturbations=self.fixed_perturbations,
            perturb_observations=self.perturb_observations,
            update_only=self.update_only,
            covariance_divisor=self.covariance_divisor,
            stagnation_window=self.stagnation_window,
            stagnation_gain_eps=self.stagnation_gain_eps,
        )

    def fit(self, problem: ProblemInstance, y=None):
        if not isinstance(problem, ProblemInstance):
            raise TypeError("fit expects a ProblemInstance")
        self.problem_ = problem
        self.result_ = run(problem, self._config())
        self.theta_ = self.result_.theta_hat
        self.status_ = self.result_.status
        self.n_iter_ = self.result_.iterations
        self.trace_ = self.result_.trace
        self.steady_state_ = self.result_.steady_state
        return self

    def predict(self, theta=None) -> np.ndarray:
        """Observed output ``H f(theta)``; defaults to the fitted estimate."""
        check_is_fitted(self, "theta_")
        theta = self.theta_ if theta is None else np.asarray(theta, dtype=float)
        x = self.problem_.model.evaluate(theta)
        return x @ self.problem_.obs.H.T
