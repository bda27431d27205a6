"""A single iteration of the iterative ensemble Kalman filter.

One iteration is an update stage (ensemble Kalman analysis of the prior
parameter and state ensembles against perturbed observations) followed by
a prediction stage that pushes the posterior parameters back through the
forward model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    Divisor,
    DimensionMismatch,
    ObservationSpec,
    check_ensemble,
    cross_covariance,
    spd_solve,
)
from .problems import ForwardModel

__all__ = [
    "KalmanGains",
    "IterationState",
    "perturb_observations",
    "compute_gains",
    "update_stage",
    "prediction_stage",
    "innovation_norm",
]


@dataclass(frozen=True)
class KalmanGains:
    """Parameter gain ``K`` (d_theta x d_y) and state gain ``K_prime`` (d_x x d_y).

    The prior covariances the gains were built from are kept alongside for
    diagnostics.
    """

    K: np.ndarray
    K_prime: np.ndarray
    C_theta_theta: Optional[np.ndarray] = field(default=None, repr=False)
    C_theta_x: Optional[np.ndarray] = field(default=None, repr=False)
    C_x_x: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass(frozen=True)
class IterationState:
    """Prior ensembles at iteration ``t``; ``x_prior[j] = f(theta_prior[j])``."""

    theta_prior: np.ndarray
    x_prior: np.ndarray
    t: int


def perturb_observations(obs: ObservationSpec, J: int, rng: np.random.Generator,
                         center: bool = True) -> np.ndarray:
    """Draw ``J`` observations ``y_bar + S xi`` with ``S S^T = Gamma``.

    With ``center=True`` the standard-normal draws are centred before
    colouring, so the observation ensemble mean is exactly ``y_bar``.
    """
    if J < 2:
        raise ValueError("J must be at least 2")
    S = obs.Gamma_sqrt
    xi = rng.standard_normal((J, obs.d_y))
    if center:
        xi = xi - xi.sum(axis=0) / J
    return obs.y_bar + xi @ S.T


def compute_gains(theta_prior, x_prior, obs: ObservationSpec,
                  divisor: Divisor | str = Divisor.POPULATION) -> KalmanGains:
    """Kalman gains from the prior ensembles.

    ``K = C_tx H^T (H C_xx H^T + Gamma)^-1`` and
    ``K' = C_xx H^T (H C_xx H^T + Gamma)^-1``, both from one factorization.
    """
    theta_prior = check_ensemble(theta_prior, "theta_prior")
    x_prior = check_ensemble(x_prior, "x_prior")
    if x_prior.shape[1] != obs.d_x:
        raise DimensionMismatch(f"state dim {x_prior.shape[1]} != H columns {obs.d_x}")
    if x_prior.shape[0] != theta_prior.shape[0]:
        raise DimensionMismatch("theta_prior and x_prior must share J")
    H = obs.H
    d_theta = theta_prior.shape[1]
    # one joint covariance gives every block with a single reduction order
    C = cross_covariance(np.hstack([theta_prior, x_prior]), None, divisor)
    C_tt, C_tx, C_xx = C[:d_theta, :d_theta], C[:d_theta, d_theta:], C[d_theta:, d_theta:]
    S = H @ C_xx @ H.T + obs.Gamma
    S = 0.5 * (S + S.T)
    # S is symmetric, so K^T = S^-1 H C_xt and K'^T = S^-1 H C_xx
    rhs = np.hstack([H @ C_tx.T, H @ C_xx])
    sol = spd_solve(S, rhs)
    return KalmanGains(
        K=sol[:, :d_theta].T.copy(),
        K_prime=sol[:, d_theta:].T.copy(),
        C_theta_theta=C_tt,
        C_theta_x=C_tx,
        C_x_x=C_xx,
    )


def update_stage(theta_prior, x_prior, obs_draws, obs: ObservationSpec,
                 gains: KalmanGains | None = None,
                 divisor: Divisor | str = Divisor.POPULATION):
    """Member-wise Kalman update of the parameter and state ensembles.

    Returns ``(theta_post, x_post)``. ``x_post`` is diagnostic only; the
    next prior state comes from the prediction stage.
    """
    theta_prior = check_ensemble(theta_prior, "theta_prior")
    x_prior = check_ensemble(x_prior, "x_prior")
    obs_draws = check_ensemble(obs_draws, "obs_draws")
    J = theta_prior.shape[0]
    if x_prior.shape[0] != J or obs_draws.shape[0] != J:
        raise DimensionMismatch("theta_prior, x_prior and obs_draws must share J")
    if obs_draws.shape[1] != obs.d_y:
        raise DimensionMismatch(f"obs_draws dim {obs_draws.shape[1]} != d_y {obs.d_y}")
    if gains is None:
        gains = compute_gains(theta_prior, x_prior, obs, divisor)
    innov = obs_draws - x_prior @ obs.H.T
    theta_post = theta_prior + innov @ gains.K.T
    x_post = x_prior + innov @ gains.K_prime.T
    return theta_post, x_post


def prediction_stage(theta_post, model: ForwardModel, t: int = 0) -> IterationState:
    """Next prior: parameters carried over, states recomputed through ``model``."""
    theta_post = check_ensemble(theta_post, "theta_post")
    if theta_post.shape[1] != model.d_theta:
        raise DimensionMismatch(
            f"ensemble dim {theta_post.shape[1]} != model d_theta {model.d_theta}"
        )
    return IterationState(theta_post, model.evaluate(theta_post), t + 1)


def innovation_norm(theta_mean, model: ForwardModel, obs: ObservationSpec) -> float:
    """Squared innovation ``||y_bar - H f(theta_mean)||^2``."""
    r = obs.y_bar - obs.H @ model.evaluate(np.asarray(theta_mean, dtype=float))
    return float(r @ r)
