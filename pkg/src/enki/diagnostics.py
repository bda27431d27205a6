"""Per-iteration instrumentation and numerical checks of the convergence analysis.

Every quantity here is computed from the raw ensembles of one iteration and
collected into an :class:`IterationRecord`. The check functions consume
traces of records (or plain matrices) and report pass/fail with margins
rather than raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .core import (
    Divisor,
    ObservationSpec,
    frobenius_norm,
    spd_solve,
    _mean,
)
from .kalman import KalmanGains, compute_gains
from .problems import ForwardModel
from .resampling import ResampleReport

__all__ = [
    "IterationRecord",
    "SteadyStateReport",
    "ShrinkageReport",
    "ResampleShiftReport",
    "record_iteration",
    "gain_factor_eigenvalues",
    "covariance_recursion_step",
    "shrinkage_bound",
    "check_per_step_shrinkage",
    "steady_state_check",
    "theorem1_bound",
    "check_resample_shift_trace",
    "evolution_matrix",
    "gradient_norm_bound",
]


@dataclass
class IterationRecord:
    """Diagnostics of one iteration.

    Covariance norms are Frobenius norms of the prior-ensemble covariances
    ``C_tt``, ``C_t,Hx`` and ``C_Hx,Hx``. ``innovation`` is the squared misfit
    at the posterior mean ``theta_mean``. ``sigma_sq`` is the trace of the
    posterior parameter covariance (the spread handed to resampling).
    """

    t: int
    norm_C_theta_theta: float
    norm_C_theta_Hx: float
    norm_C_Hx_Hx: float
    norm_K: float
    innovation: float
    gain_delta_after_resample: float
    sigma_sq: float
    theta_mean: np.ndarray
    x_prior_mean: np.ndarray
    x_post_mean: np.ndarray
    # matrices kept for the trace-level checks; all small
    C_theta_theta: np.ndarray = field(repr=False, default=None)
    C_theta_Hx: np.ndarray = field(repr=False, default=None)
    C_Hx_Hx: np.ndarray = field(repr=False, default=None)
    C_xx: np.ndarray = field(repr=False, default=None)
    K: np.ndarray = field(repr=False, default=None)
    # resampling diagnostics; zero (or None) when resampling is off
    sigma_sq_max: float = 0.0
    shift_C_theta_x: float = 0.0
    shift_C_x_x: float = 0.0
    norm_C_theta_x_post: float = 0.0
    norm_C_x_x_post: float = 0.0
    resample_mean_error: float = 0.0
    resample_cov_error: float = 0.0
    theta_lo: np.ndarray = field(repr=False, default=None)
    theta_hi: np.ndarray = field(repr=False, default=None)

    CSV_SCALARS = (
        "t",
        "norm_C_theta_theta",
        "norm_C_theta_Hx",
        "norm_C_Hx_Hx",
        "norm_K",
        "innovation",
        "gain_delta_after_resample",
        "sigma_sq",
    )
    CSV_VECTORS = ("theta_mean", "x_prior_mean", "x_post_mean")

    def csv_header(self) -> list[str]:
        cols = list(self.CSV_SCALARS)
        for name in self.CSV_VECTORS:
            cols += [f"{name}_{i}" for i in range(len(getattr(self, name)))]
        return cols

    def csv_row(self) -> list:
        row = [getattr(self, name) for name in self.CSV_SCALARS]
        for name in self.CSV_VECTORS:
            row += [float(v) for v in getattr(self, name)]
        return row

    @property
    def lambda_min_HCH(self) -> float:
        """Smallest eigenvalue of ``H C_xx H^T``."""
        return float(np.linalg.eigvalsh(self.C_Hx_Hx)[0])

    def is_finite(self) -> bool:
        scal = [getattr(self, name) for name in self.CSV_SCALARS]
        vecs = [getattr(self, name) for name in self.CSV_VECTORS]
        return bool(np.isfinite(scal).all() and np.isfinite(np.concatenate(vecs)).all())


@dataclass(frozen=True)
class SteadyStateReport:
    """Output-space steady-state quantities and the identity mismatch.

    ``oscillation = H x_post - H x_prior``, ``prior_error = H x_prior - y_bar``
    and ``post_error = H x_post - y_bar`` (all from ensemble means).
    """

    oscillation: np.ndarray
    prior_error: np.ndarray
    post_error: np.ndarray
    identity_residual: float

    @property
    def oscillation_norm(self) -> float:
        return float(np.linalg.norm(self.oscillation))

    @property
    def prior_error_norm(self) -> float:
        return float(np.linalg.norm(self.prior_error))

    @property
    def post_error_norm(self) -> float:
        return float(np.linalg.norm(self.post_error))

    def to_dict(self) -> dict:
        return {
            "oscillation_norm": self.oscillation_norm,
            "prior_error_norm": self.prior_error_norm,
            "post_error_norm": self.post_error_norm,
            "identity_residual": float(self.identity_residual),
        }


def record_iteration(
    t: int,
    theta_prior,
    x_prior,
    gains: KalmanGains,
    theta_post,
    x_post,
    obs: ObservationSpec,
    model: ForwardModel,
    x_pred=None,
    theta_resampled=None,
    x_resampled=None,
    resample_report: Optional[ResampleReport] = None,
    divisor: Divisor | str = Divisor.POPULATION,
) -> IterationRecord:
    """Assemble the diagnostics of one iteration from raw ensembles.

    ``x_pred = f(theta_post)`` is needed only when resampling is on: the
    gain and covariance shifts compare ``(theta_post, x_pred)`` with
    ``(theta_resampled, x_resampled)``.
    """
    H = obs.H
    if gains.C_x_x is None:
        gains = compute_gains(theta_prior, x_prior, obs, divisor)
    C_tt, C_xx = gains.C_theta_theta, gains.C_x_x
    C_tHx = gains.C_theta_x @ H.T
    C_HxHx = H @ C_xx @ H.T
    C_HxHx = 0.5 * (C_HxHx + C_HxHx.T)

    theta_post = np.asarray(theta_post, dtype=float)
    x_prior = np.asarray(x_prior, dtype=float)
    x_post = np.asarray(x_post, dtype=float)
    J = theta_post.shape[0]
    theta_mean = _mean(theta_post)
    fx = model.evaluate(theta_mean)
    r = obs.y_bar - H @ fx
    dev = theta_post - theta_mean

    rec = IterationRecord(
        t=int(t),
        norm_C_theta_theta=frobenius_norm(C_tt),
        norm_C_theta_Hx=frobenius_norm(C_tHx),
        norm_C_Hx_Hx=frobenius_norm(C_HxHx),
        norm_K=frobenius_norm(gains.K),
        innovation=float(r @ r),
        gain_delta_after_resample=0.0,
        sigma_sq=float(np.sum(dev * dev) / (J if Divisor(divisor) is Divisor.POPULATION else J - 1)),
        theta_mean=theta_mean,
        x_prior_mean=_mean(x_prior),
        x_post_mean=_mean(x_post),
        C_theta_theta=C_tt,
        C_theta_Hx=C_tHx,
        C_Hx_Hx=C_HxHx,
        C_xx=C_xx,
        K=gains.K,
    )
    if theta_resampled is not None:
        g0 = compute_gains(theta_post, x_pred, obs, divisor)
        g1 = compute_gains(theta_resampled, x_resampled, obs, divisor)
        C_tx0, C_xx0, C_tx1, C_xx1 = g0.C_theta_x, g0.C_x_x, g1.C_theta_x, g1.C_x_x
        rec.gain_delta_after_resample = frobenius_norm(g0.K - g1.K)
        rec.shift_C_theta_x = frobenius_norm(C_tx1 - C_tx0)
        rec.shift_C_x_x = frobenius_norm(C_xx1 - C_xx0)
        rec.norm_C_theta_x_post = frobenius_norm(C_tx0)
        rec.norm_C_x_x_post = frobenius_norm(C_xx0)
        visited = np.vstack([theta_prior, theta_post, theta_resampled])
        rec.theta_lo = visited.min(axis=0)
        rec.theta_hi = visited.max(axis=0)
        if resample_report is not None:
            rec.sigma_sq_max = resample_report.sigma_sq_max
            rec.resample_mean_error = resample_report.mean_error
            rec.resample_cov_error = resample_report.cov_error
    return rec


def gain_factor_eigenvalues(C_HxHx, Gamma) -> np.ndarray:
    """Eigenvalues of ``Gamma (C_HxHx + Gamma)^-1``, ascending.

    Computed from the symmetric pencil ``(Gamma, C_HxHx + Gamma)``. For SPD
    ``Gamma`` and PSD ``C_HxHx`` they lie in ``(0, 1]``.
    """
    G = np.atleast_2d(np.asarray(Gamma, dtype=float))
    S = np.atleast_2d(np.asarray(C_HxHx, dtype=float)) + G
    return scipy.linalg.eigh(G, 0.5 * (S + S.T), eigvals_only=True)


def covariance_recursion_step(C_tt, C_tHx, C_HxHx, Gamma) -> np.ndarray:
    """One step of ``C_tt - C_tHx (C_HxHx + Gamma)^-1 C_tHx^T``."""
    C_tt = np.atleast_2d(np.asarray(C_tt, dtype=float))
    C_tHx = np.atleast_2d(np.asarray(C_tHx, dtype=float))
    S = np.atleast_2d(np.asarray(C_HxHx, dtype=float)) + np.atleast_2d(np.asarray(Gamma, dtype=float))
    S = 0.5 * (S + S.T)
    out = C_tt - C_tHx @ spd_solve(S, C_tHx.T)
    return 0.5 * (out + out.T)


def shrinkage_bound(alpha: float, delta: float, t: int, norm_C1: float) -> float:
    """Geometric bound ``(alpha / (delta + alpha))**t * norm_C1``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if delta < 0 or t < 0:
        raise ValueError("delta and t must be non-negative")
    return (alpha / (delta + alpha)) ** t * norm_C1


@dataclass(frozen=True)
class ShrinkageReport:
    """Per-step outcome of the shrinkage inequality.

    ``margin[i] = bound[i] - actual[i]`` for the step from record ``i`` to
    ``i + 1``; a step passes when ``actual <= bound * (1 + rtol)``.
    """

    actual: np.ndarray
    bound: np.ndarray
    factor: np.ndarray
    passed: np.ndarray

    @property
    def margin(self) -> np.ndarray:
        return self.bound - self.actual

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))


def check_per_step_shrinkage(
    trace: Sequence[IterationRecord],
    alpha: float,
    lambda_min_seq: Optional[Sequence[float]] = None,
    rtol: float = 1e-9,
) -> ShrinkageReport:
    """Check ``||C_Hx,t+1|| <= alpha / (lambda_min_t + alpha) * ||C_Hx,t||`` per step.

    Valid for update-only traces with ``Gamma = alpha I``. ``lambda_min_seq``
    defaults to the smallest eigenvalue of each recorded ``H C_xx H^T``.
    """
    if lambda_min_seq is None:
        lambda_min_seq = [r.lambda_min_HCH for r in trace]
    lam = np.maximum(np.asarray(lambda_min_seq, dtype=float), 0.0)
    norms = np.array([r.norm_C_theta_Hx for r in trace])
    factor = alpha / (lam[:-1] + alpha)
    bound = factor * norms[:-1]
    actual = norms[1:]
    passed = actual <= bound * (1.0 + rtol)
    return ShrinkageReport(actual, bound, factor, passed)


def _relative(a: np.ndarray, b: np.ndarray, scale: float) -> float:
    diff = float(np.linalg.norm(a - b))
    if diff == 0.0:
        return 0.0
    return diff / scale if scale > 0 else np.inf


def steady_state_check(x_prior_mean, x_post_mean, C_xx, obs: ObservationSpec) -> SteadyStateReport:
    """Compare the output-space steady-state quantities with their closed forms.

    With ``S = H C_xx H^T + Gamma`` the closed forms are
    ``oscillation = H C_xx H^T S^-1 (y_bar - H x_prior)`` and
    ``post_error = Gamma S^-1 (H x_prior - y_bar)``. Both are linear images of
    the prior error, so each mismatch is measured relative to
    ``||H x_prior - y_bar||``. ``identity_residual`` is the larger of the two.
    """
    H = obs.H
    Hx_prior = H @ np.asarray(x_prior_mean, dtype=float)
    Hx_post = H @ np.asarray(x_post_mean, dtype=float)
    HCH = H @ np.atleast_2d(np.asarray(C_xx, dtype=float)) @ H.T
    HCH = 0.5 * (HCH + HCH.T)
    S = HCH + obs.Gamma
    prior_error = Hx_prior - obs.y_bar
    oscillation = Hx_post - Hx_prior
    post_error = Hx_post - obs.y_bar
    v = spd_solve(S, -prior_error)
    osc_closed = HCH @ v
    post_closed = -(obs.Gamma @ v)
    scale = float(np.linalg.norm(prior_error))
    residual = max(
        _relative(oscillation, osc_closed, scale),
        _relative(post_error, post_closed, scale),
    )
    return SteadyStateReport(oscillation, prior_error, post_error, residual)


def theorem1_bound(M: float, sigma_sq: float) -> tuple[float, float]:
    """Bounds ``(2 sqrt(2) M sigma^2, 2 sqrt(2) M^2 sigma^2)`` on the covariance shifts."""
    if M < 0 or sigma_sq < 0:
        raise ValueError("M and sigma_sq must be non-negative")
    c = 2.0 * np.sqrt(2.0) * sigma_sq
    return c * M, c * M * M


@dataclass(frozen=True)
class ResampleShiftReport:
    """Covariance shifts under resampling against their bounds plus slack."""

    M: float
    argmax: np.ndarray
    shift_theta_x: np.ndarray
    shift_x_x: np.ndarray
    bound_theta_x: np.ndarray
    bound_x_x: np.ndarray
    passed: np.ndarray

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))


def check_resample_shift_trace(
    trace: Sequence[IterationRecord],
    model: ForwardModel,
    n_members: int,
    grid: int = 101,
    pad: float = 1.0,
    slack: float = 5.0,
) -> ResampleShiftReport:
    """Check the resampling covariance-shift bounds along a trace.

    ``M`` is the gradient-norm estimate over the box hull of every visited
    member, padded by ``pad``. Each bound gets a Monte-Carlo allowance of
    ``slack * ||C||_F / sqrt(J)`` with ``C`` the matching pre-resampling
    covariance, and uses the largest eigenvalue of the parameter covariance
    as ``sigma^2``.
    """
    lo = np.min([r.theta_lo for r in trace], axis=0) - pad
    hi = np.max([r.theta_hi for r in trace], axis=0) + pad
    M, arg = gradient_norm_bound(model, lo, hi, grid)
    s2 = np.array([r.sigma_sq_max for r in trace])
    b_tx, b_xx = 2.0 * np.sqrt(2.0) * s2 * M, 2.0 * np.sqrt(2.0) * s2 * M * M
    root_j = np.sqrt(n_members)
    b_tx = b_tx + slack * np.array([r.norm_C_theta_x_post for r in trace]) / root_j
    b_xx = b_xx + slack * np.array([r.norm_C_x_x_post for r in trace]) / root_j
    s_tx = np.array([r.shift_C_theta_x for r in trace])
    s_xx = np.array([r.shift_C_x_x for r in trace])
    passed = (s_tx <= b_tx) & (s_xx <= b_xx)
    return ResampleShiftReport(M, arg, s_tx, s_xx, b_tx, b_xx, passed)


def evolution_matrix(grad_f, H, K) -> tuple[np.ndarray, np.ndarray]:
    """Linearized evolution matrix of the extended state and its eigenvalues.

    ``A = [[I, -K], [H grad_f, -H grad_f K]]``. Eigenvalues are sorted by
    modulus, ties broken by real then imaginary part.
    """
    G = np.atleast_2d(np.asarray(grad_f, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    HG = H @ G
    d_theta = G.shape[1]
    A = np.block([[np.eye(d_theta), -K], [HG, -HG @ K]])
    ev = np.linalg.eigvals(A)
    order = np.lexsort((ev.imag, ev.real, np.abs(ev)))
    return A, ev[order]


def gradient_norm_bound(model: ForwardModel, lower, upper, grid: int = 101):
    """Largest spectral norm of the model Jacobian over a ``grid**d`` lattice.

    This is a lower estimate of the supremum over the box. Returns
    ``(M, argmax)``.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != (model.d_theta,) or upper.shape != lower.shape:
        raise ValueError("box bounds must have length d_theta")
    if grid < 1:
        raise ValueError("grid must be positive")
    axes = [np.linspace(a, b, grid) for a, b in zip(lower, upper)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.d_theta)
    G = model.gradient(pts)
    norms = np.linalg.norm(G, ord=2, axis=(1, 2))
    i = int(np.argmax(norms))
    return float(norms[i]), pts[i]
