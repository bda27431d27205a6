"""Ensemble containers, empirical moments and small dense linear algebra.

Ensembles are plain ``(J, d)`` float arrays, one member per row. The helpers
in this module validate that layout and compute the moments every other
module builds on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

__all__ = [
    "EnkiError",
    "DimensionMismatch",
    "SingularSystem",
    "NotPSD",
    "Divisor",
    "ObservationSpec",
    "check_ensemble",
    "ensemble_mean",
    "cross_covariance",
    "spd_solve",
    "principal_sqrt",
    "principal_inv_sqrt",
    "frobenius_norm",
]


class EnkiError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(EnkiError, ValueError):
    pass


class SingularSystem(EnkiError, np.linalg.LinAlgError):
    """A symmetric system could not be factorized, even after jitter."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class NotPSD(EnkiError, ValueError):
    """A matrix expected to be positive semidefinite has a negative eigenvalue."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class Divisor(str, enum.Enum):
    """Normalization of empirical covariances."""

    POPULATION = "population"  # 1/J
    SAMPLE = "sample"  # 1/(J-1)


def check_ensemble(members, name: str = "ensemble", min_members: int = 2) -> np.ndarray:
    """Validate and return an ensemble as a C-contiguous ``(J, d)`` float array.

    A 1-D input is read as J scalar members.
    """
    arr = np.asarray(members, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D (members x dim), got shape {arr.shape}")
    if arr.shape[0] < min_members:
        raise DimensionMismatch(
            f"{name} needs at least {min_members} members, got {arr.shape[0]}"
        )
    if arr.shape[1] < 1:
        raise DimensionMismatch(f"{name} has zero-dimensional members")
    return np.ascontiguousarray(arr)


def _mean(e: np.ndarray) -> np.ndarray:
    # shifted by the first member: exact for constant ensembles and less
    # cancellation when the spread is small next to the mean
    return e[0] + (e - e[0]).sum(axis=0) / e.shape[0]


def ensemble_mean(e) -> np.ndarray:
    """Arithmetic mean of the members, shape ``(d,)``.

    Constant ensembles return their common member exactly.
    """
    return _mean(check_ensemble(e))


def _deviations(e: np.ndarray) -> np.ndarray:
    return e - _mean(e)


def cross_covariance(a, b=None, divisor: Divisor | str = Divisor.POPULATION) -> np.ndarray:
    """Empirical cross-covariance ``sum_j (a_j - a_bar)(b_j - b_bar)^T / n``.

    ``n`` is J for ``Divisor.POPULATION`` and J - 1 for ``Divisor.SAMPLE``.
    With ``b`` omitted the self-covariance of ``a`` is returned.

    The sum over members is taken elementwise on the outer products, so
    ``cross_covariance(a, b)`` is bit-for-bit the transpose of
    ``cross_covariance(b, a)`` and self-covariances are exactly symmetric.
    """
    a = check_ensemble(a, "a")
    b = a if b is None else check_ensemble(b, "b")
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(
            f"ensembles have different member counts: {a.shape[0]} vs {b.shape[0]}"
        )
    J = a.shape[0]
    n = J if Divisor(divisor) is Divisor.POPULATION else J - 1
    da = _deviations(a)
    db = da if b is a else _deviations(b)
    outer = da[:, :, None] * db[:, None, :]
    return outer.sum(axis=0) / n


def frobenius_norm(A) -> float:
    a = np.asarray(A, dtype=float).ravel()
    return math.sqrt(float(a @ a))


def _check_symmetric(A: np.ndarray, rtol: float, name: str) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {A.shape}")
    if A.shape[0] == 1:
        return
    scale = np.abs(A).max() if A.size else 0.0
    if scale > 0 and np.abs(A - A.T).max() > rtol * scale:
        raise DimensionMismatch(f"{name} is not symmetric within {rtol:g} relative")


def spd_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive (semi)definite ``A``.

    Uses a Cholesky factorization. If that fails the diagonal is jittered
    once by ``1e-12 * trace(A) / d`` and the factorization retried.

    Raises
    ------
    SingularSystem
        If the jittered matrix still cannot be factorized.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    _check_symmetric(A, 1e-10, "A")
    if B.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"A is {A.shape} but B has {B.shape[0]} rows")
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        raise ValueError("spd_solve received non-finite input")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        d = A.shape[0]
        jitter = 1e-12 * np.trace(A) / d
        try:
            if not jitter > 0:
                raise np.linalg.LinAlgError("non-positive jitter")
            factor = scipy.linalg.cho_factor(A + jitter * np.eye(d), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            lam_min = float(np.linalg.eigvalsh(A)[0])
            raise SingularSystem(
                f"matrix is singular to working precision (smallest eigenvalue {lam_min:.3e})",
                lam_min,
            ) from None
    return scipy.linalg.cho_solve(factor, B, check_finite=False)


def _eigh_psd(A, rank_tol: float, name: str):
    A = np.asarray(A, dtype=float)
    _check_symmetric(A, 1e-10, name)
    lam, V = np.linalg.eigh(0.5 * (A + A.T))
    lam_max = lam[-1] if lam.size else 0.0
    cutoff = rank_tol * max(lam_max, 0.0)
    if lam.size and lam[0] < -cutoff:
        raise NotPSD(
            f"{name} has negative eigenvalue {lam[0]:.3e} (largest {lam_max:.3e})",
            float(lam[0]),
        )
    keep = lam > cutoff if lam_max > 0 else np.zeros_like(lam, dtype=bool)
    return lam, V, keep


def principal_sqrt(A, rank_tol: float = 1e-12) -> tuple[np.ndarray, int]:
    """Principal square root ``S = V diag(sqrt(lam)) V^T`` of a PSD matrix.

    Eigenvalues at or below ``rank_tol * lam_max`` are dropped, so ``S S^T``
    reproduces ``A`` on the retained subspace. Returns ``(S, rank)``.

    Examples
    --------
    >>> S, r = principal_sqrt(np.diag([4.0, 0.0]))
    >>> S.round(12).tolist(), r
    ([[2.0, 0.0], [0.0, 0.0]], 1)
    """
    lam, V, keep = _eigh_psd(A, rank_tol, "A")
    Vk = V[:, keep]
    S = (Vk * np.sqrt(lam[keep])) @ Vk.T
    return S, int(keep.sum())


def principal_inv_sqrt(A, rank_tol: float = 1e-12) -> tuple[np.ndarray, int]:
    """Pseudo-inverse of the principal square root, on the retained subspace."""
    lam, V, keep = _eigh_psd(A, rank_tol, "A")
    Vk = V[:, keep]
    W = (Vk / np.sqrt(lam[keep])) @ Vk.T
    return W, int(keep.sum())


@dataclass(frozen=True)
class ObservationSpec:
    """Linear observation operator, observed mean and noise covariance.

    ``Gamma`` may be given as a positive scalar, expanded to ``Gamma * I``.
    """

    H: np.ndarray
    y_bar: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        y_bar = np.atleast_1d(np.asarray(self.y_bar, dtype=float))
        if y_bar.ndim != 1:
            raise DimensionMismatch("y_bar must be a vector")
        d_y = H.shape[0]
        if y_bar.shape[0] != d_y:
            raise DimensionMismatch(f"H has {d_y} rows but y_bar has length {y_bar.shape[0]}")
        G = np.asarray(self.Gamma, dtype=float)
        if G.ndim == 0:
            if not G > 0:
                raise ValueError(f"scalar Gamma must be positive, got {float(G)}")
            G = float(G) * np.eye(d_y)
        G = np.atleast_2d(G)
        if G.shape != (d_y, d_y):
            raise DimensionMismatch(f"Gamma must be {d_y}x{d_y}, got {G.shape}")
        _eigh_psd(G, 1e-12, "Gamma")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "y_bar", y_bar)
        object.__setattr__(self, "Gamma", G)

    @property
    def d_y(self) -> int:
        return self.H.shape[0]

    @property
    def d_x(self) -> int:
        return self.H.shape[1]

    @cached_property
    def Gamma_sqrt(self) -> np.ndarray:
        """Principal square root of ``Gamma``."""
        return principal_sqrt(self.Gamma)[0]

    def with_gamma(self, Gamma) -> "ObservationSpec":
        return ObservationSpec(self.H, self.y_bar, Gamma)
