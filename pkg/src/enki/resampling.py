"""Moment-matched resampling of a parameter ensemble.

The posterior ensemble is replaced by fresh draws from a standardized base
distribution, affinely corrected so the new ensemble has exactly the same
sample mean and sample covariance as the old one. The base distribution
only controls the shape (kurtosis) of the new spread.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state

from .core import (
    Divisor,
    EnkiError,
    check_ensemble,
    cross_covariance,
    ensemble_mean,
    frobenius_norm,
    _eigh_psd,
)

__all__ = [
    "Mode",
    "Base",
    "KURTOSIS",
    "ResamplingPolicy",
    "ResampleReport",
    "RankDeficientResample",
    "sample_base",
    "moment_matched_resample",
    "resample_deviation_stats",
    "MomentMatchedResampler",
]


class Mode(str, enum.Enum):
    OFF = "off"
    EVERY_ITERATION = "every_iteration"


class Base(str, enum.Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"


# theoretical (non-excess) kurtosis of each standardized base
KURTOSIS = {Base.UNIFORM: 1.8, Base.GAUSSIAN: 3.0, Base.LAPLACE: 6.0}

UNIFORM_HALF_WIDTH = np.sqrt(3.0)
LAPLACE_SCALE = 1.0 / np.sqrt(2.0)


class RankDeficientResample(EnkiError):
    """Raw base draws did not span the target subspace, twice in a row."""


@dataclass(frozen=True)
class ResamplingPolicy:
    mode: Mode = Mode.OFF
    base: Base = Base.GAUSSIAN
    rank_tol: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "base", Base(self.base))
        if not self.rank_tol >= 0:
            raise ValueError("rank_tol must be non-negative")

    @classmethod
    def from_string(cls, name: str, rank_tol: float = 1e-12) -> "ResamplingPolicy":
        """Parse the config form ``off | uniform | gaussian | laplace``."""
        name = name.lower()
        if name == "off":
            return cls(Mode.OFF, Base.GAUSSIAN, rank_tol)
        try:
            return cls(Mode.EVERY_ITERATION, Base(name), rank_tol)
        except ValueError:
            raise ValueError(
                f"unknown resampling {name!r}; choose off, uniform, gaussian or laplace"
            ) from None

    @property
    def enabled(self) -> bool:
        return self.mode is Mode.EVERY_ITERATION

    def label(self) -> str:
        return self.base.value if self.enabled else "off"


@dataclass(frozen=True)
class ResampleReport:
    """Moment errors and spread summaries for one resampling step.

    ``sigma_sq`` is the trace of the pre-resampling covariance and
    ``sigma_sq_max`` its largest eigenvalue. ``raw_kurtosis`` is measured on
    the base draws before the affine correction.
    """

    mean_error: float = 0.0
    cov_error: float = 0.0
    raw_kurtosis: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma_sq: float = 0.0
    sigma_sq_max: float = 0.0
    rank: int = 0


def sample_base(base: Base | str, J: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. standardized draws (zero mean, unit variance), shape ``(J, d)``."""
    if J < 2:
        raise ValueError("J must be at least 2")
    base = Base(base)
    if base is Base.UNIFORM:
        return rng.uniform(-UNIFORM_HALF_WIDTH, UNIFORM_HALF_WIDTH, size=(J, d))
    if base is Base.GAUSSIAN:
        return rng.standard_normal((J, d))
    return rng.laplace(0.0, LAPLACE_SCALE, size=(J, d))


def _kurtosis(z: np.ndarray) -> np.ndarray:
    dz = z - z.mean(axis=0)
    m2 = np.mean(dz**2, axis=0)
    m4 = np.mean(dz**4, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return m4 / m2**2


def moment_matched_resample(theta, policy: ResamplingPolicy, rng: np.random.Generator,
                            divisor: Divisor | str = Divisor.POPULATION):
    """Redraw ``theta`` from ``policy.base`` keeping its sample mean and covariance.

    The target covariance ``C = U diag(lam) U^T`` is restricted to its
    eigenvalues above ``rank_tol * lam_max`` (rank ``r``). Raw draws are
    projected onto ``U_r``, centred, whitened by the inverse principal
    square root of their own covariance and recoloured by ``sqrt(lam_r)``.
    For full rank this equals whitening the raw draws and recolouring by the
    principal square root of ``C``; for low rank it keeps the new ensemble
    inside the span of the old one.

    Returns ``(theta_new, report)``. With the policy off, or a collapsed
    ensemble, ``theta`` is returned unchanged.
    """
    theta = check_ensemble(theta, "theta")
    J, d = theta.shape
    m = ensemble_mean(theta)
    C = cross_covariance(theta, theta, divisor)
    if not policy.enabled:
        return theta, ResampleReport()

    lam, U, keep = _eigh_psd(C, policy.rank_tol, "theta covariance")
    r = int(keep.sum())
    sigma_sq = float(np.trace(C))
    sigma_sq_max = float(max(lam[-1], 0.0))
    if r == 0:
        return theta, ResampleReport(0.0, 0.0, np.full(d, np.nan), sigma_sq, sigma_sq_max, 0)
    if r > J - 1:
        raise RankDeficientResample(f"target rank {r} exceeds J - 1 = {J - 1}")
    Ur = U[:, keep]
    root = np.sqrt(lam[keep])

    for _ in range(2):
        raw = sample_base(policy.base, J, d, rng)
        Z = raw @ Ur
        Z = Z - Z.sum(axis=0) / J
        Cz = cross_covariance(Z, Z, divisor)
        mu, V, kz = _eigh_psd(Cz, policy.rank_tol, "raw draw covariance")
        if kz.sum() == r:
            break
    else:
        raise RankDeficientResample(
            f"raw draws have rank {int(kz.sum())} below target rank {r} after one redraw"
        )
    W = (V / np.sqrt(mu)) @ V.T
    theta_new = m + ((Z @ W) * root) @ Ur.T

    m_new = ensemble_mean(theta_new)
    C_new = cross_covariance(theta_new, theta_new, divisor)
    report = ResampleReport(
        mean_error=float(np.linalg.norm(m_new - m)),
        cov_error=frobenius_norm(C_new - C),
        raw_kurtosis=_kurtosis(raw),
        sigma_sq=sigma_sq,
        sigma_sq_max=sigma_sq_max,
        rank=r,
    )
    return theta_new, report


def resample_deviation_stats(pre, post) -> float:
    """Mean squared member displacement ``(1/J) sum_j ||post_j - pre_j||^2``."""
    pre = check_ensemble(pre, "pre")
    post = check_ensemble(post, "post")
    if pre.shape != post.shape:
        raise ValueError(f"shape mismatch {pre.shape} vs {post.shape}")
    diff = post - pre
    return float(np.sum(diff * diff) / pre.shape[0])


class MomentMatchedResampler(BaseEstimator):
    """Estimator wrapper around :func:`moment_matched_resample`.

    Parameters
    ----------
    base : {"uniform", "gaussian", "laplace"}
        Standardized base distribution of the new draws.
    rank_tol : float
        Relative eigenvalue cutoff for the retained subspace.
    random_state : int, Generator or None
        Seed for the base draws.

    Attributes
    ----------
    mean_ : ndarray of shape (d,)
    covariance_ : ndarray of shape (d, d)
    report_ : ResampleReport
        Report from the last :meth:`fit_resample` call.
    """

    def __init__(self, base="gaussian", rank_tol=1e-12, random_state=None):
        self.base = base
        self.rank_tol = rank_tol
        self.random_state = random_state

    def _rng(self):
        if isinstance(self.random_state, np.random.Generator):
            return self.random_state
        if self.random_state is None or isinstance(self.random_state, (int, np.integer)):
            return np.random.default_rng(self.random_state)
        # legacy RandomState: derive a Generator seed from it
        seed = check_random_state(self.random_state).randint(0, 2**63 - 1, dtype=np.int64)
        return np.random.default_rng(int(seed))

    def fit(self, X, y=None):
        X = check_ensemble(X, "X")
        self.mean_ = ensemble_mean(X)
        self.covariance_ = cross_covariance(X)
        self.n_features_in_ = X.shape[1]
        return self

    def fit_resample(self, X, y=None):
        self.fit(X)
        policy = ResamplingPolicy(Mode.EVERY_ITERATION, self.base, self.rank_tol)
        Xr, self.report_ = moment_matched_resample(X, policy, self._rng())
        return Xr
