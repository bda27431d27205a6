"""Forward models and the built-in inverse problems."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import DimensionMismatch, EnkiError, ObservationSpec, principal_sqrt

__all__ = [
    "ForwardModel",
    "ProblemInstance",
    "ModelEvaluationError",
    "gaussian_bumps_model",
    "gaussian_bumps_problem",
    "linear_model",
    "linear_problem",
    "finite_difference_gradient",
    "get_problem",
    "PROBLEMS",
]

GAUSSIAN_BUMPS_INIT_MEAN = (2.0, 2.0)
GAUSSIAN_BUMPS_INIT_VAR = 0.01


class ModelEvaluationError(EnkiError):
    def __init__(self, message: str, member: int):
        super().__init__(message)
        self.member = member


@dataclass(frozen=True)
class ForwardModel:
    """A deterministic map ``theta -> x``.

    ``func`` must be vectorized over rows: it receives an ``(n, d_theta)``
    array and returns ``(n, d_x)``. ``jacobian``, when given, is vectorized
    the same way and returns ``(n, d_x, d_theta)``. Use
    :meth:`from_pointwise` to wrap a function of a single vector.
    """

    d_theta: int
    d_x: int
    func: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"

    @classmethod
    def from_pointwise(cls, func, d_theta, d_x, jacobian=None, name="custom"):
        def batched(theta):
            out = np.empty((theta.shape[0], d_x))
            for j, row in enumerate(theta):
                try:
                    out[j] = func(row)
                except Exception as exc:
                    raise ModelEvaluationError(
                        f"forward model failed on member {j}: {exc}", j
                    ) from exc
            return out

        batched_jac = None
        if jacobian is not None:
            def batched_jac(theta):
                return np.stack([np.asarray(jacobian(row), dtype=float).reshape(d_x, d_theta)
                                 for row in theta])
        return cls(d_theta, d_x, batched, batched_jac, name)

    def __call__(self, theta) -> np.ndarray:
        return self.evaluate(theta)

    def evaluate(self, theta) -> np.ndarray:
        """Evaluate on a single vector ``(d_theta,)`` or on rows ``(n, d_theta)``."""
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        rows = np.atleast_2d(theta)
        if rows.shape[1] != self.d_theta:
            raise DimensionMismatch(
                f"model expects d_theta={self.d_theta}, got {rows.shape[1]}"
            )
        x = np.asarray(self.func(rows), dtype=float).reshape(rows.shape[0], self.d_x)
        return x[0] if single else x

    def gradient(self, theta, h: float = 1e-5) -> np.ndarray:
        """Jacobian ``(d_x, d_theta)``, or ``(n, d_x, d_theta)`` for row input.

        Falls back to central finite differences when no analytic form exists.
        """
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        rows = np.atleast_2d(theta)
        if self.jacobian is not None:
            G = np.asarray(self.jacobian(rows), dtype=float)
        else:
            G = _fd_jacobian_rows(self, rows, h)
        return G[0] if single else G


@dataclass(frozen=True)
class ProblemInstance:
    model: ForwardModel
    obs: ObservationSpec
    init_mean: np.ndarray
    init_cov: np.ndarray
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.obs.d_x != self.model.d_x:
            raise DimensionMismatch(
                f"H has {self.obs.d_x} columns but the model state has d_x={self.model.d_x}"
            )
        mean = np.atleast_1d(np.asarray(self.init_mean, dtype=float))
        cov = np.asarray(self.init_cov, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(self.model.d_theta)
        if mean.shape != (self.model.d_theta,) or cov.shape != (self.model.d_theta,) * 2:
            raise DimensionMismatch("init_mean/init_cov do not match d_theta")
        principal_sqrt(cov)  # raises NotPSD
        object.__setattr__(self, "init_mean", mean)
        object.__setattr__(self, "init_cov", cov)

    def innovation(self, theta) -> float:
        """Squared misfit ``||y_bar - H f(theta)||^2``."""
        r = self.obs.y_bar - self.obs.H @ self.model.evaluate(theta)
        return float(r @ r)


def _bumps(theta):
    a = theta + 1.0
    b = theta - 1.0
    out = np.empty((theta.shape[0], 2))
    out[:, 0] = -(a * a).sum(axis=1)
    out[:, 1] = -(b * b).sum(axis=1)
    return np.exp(out, out=out)


def _bumps_jacobian(theta):
    x = _bumps(theta)
    t1, t2 = theta[:, 0], theta[:, 1]
    J = np.empty((theta.shape[0], 2, 2))
    J[:, 0, 0] = -2.0 * (t1 + 1.0) * x[:, 0]
    J[:, 0, 1] = -2.0 * (t2 + 1.0) * x[:, 0]
    J[:, 1, 0] = -2.0 * (t1 - 1.0) * x[:, 1]
    J[:, 1, 1] = -2.0 * (t2 - 1.0) * x[:, 1]
    return J


def gaussian_bumps_model() -> ForwardModel:
    """Two Gaussian bumps centred at (-1, -1) and (1, 1)."""
    return ForwardModel(2, 2, _bumps, _bumps_jacobian, name="gaussian_bumps")


def gaussian_bumps_problem(
    gamma: float = 0.01,
    y_bar: float = -1.0,
    init_mean=GAUSSIAN_BUMPS_INIT_MEAN,
    init_cov=GAUSSIAN_BUMPS_INIT_VAR,
) -> ProblemInstance:
    """The two-bump example observed through ``H = [-1.5, -1.0]``.

    The default start ``N((2, 2), 0.01 I)`` sits in the upper-right quadrant,
    where the plain iteration stalls before reaching the misfit minimum.
    """
    obs = ObservationSpec(np.array([[-1.5, -1.0]]), np.atleast_1d(np.asarray(y_bar, dtype=float)), gamma)
    return ProblemInstance(
        gaussian_bumps_model(),
        obs,
        init_mean,
        init_cov,
        name="gaussian_bumps",
        params={"gamma": gamma, "y_bar": y_bar},
    )


def linear_model(F) -> ForwardModel:
    F = np.atleast_2d(np.asarray(F, dtype=float))
    d_x, d_theta = F.shape

    def func(theta):
        return theta @ F.T

    def jac(theta):
        return np.broadcast_to(F, (theta.shape[0], d_x, d_theta)).copy()

    return ForwardModel(d_theta, d_x, func, jac, name="linear")


def linear_problem(F=1.0, H=1.0, y_bar=1.0, gamma=0.25, init_mean=0.0, init_cov=1.0):
    model = linear_model(F)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape == (1, 1) and model.d_x > 1:
        H = float(H[0, 0]) * np.eye(model.d_x)
    obs = ObservationSpec(H, np.atleast_1d(np.asarray(y_bar, dtype=float)), gamma)
    mean = np.broadcast_to(np.asarray(init_mean, dtype=float), (model.d_theta,))
    return ProblemInstance(model, obs, mean, init_cov, name="linear",
                           params={"F": np.asarray(F).tolist()})


def _fd_jacobian_rows(model: ForwardModel, rows: np.ndarray, h: float) -> np.ndarray:
    n, d = rows.shape
    G = np.empty((n, model.d_x, d))
    for i in range(d):
        step = np.zeros(d)
        step[i] = h
        G[:, :, i] = (model.evaluate(rows + step) - model.evaluate(rows - step)) / (2 * h)
    return G


def finite_difference_gradient(model: ForwardModel, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian ``(d_x, d_theta)`` at a single point."""
    if not h > 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    return _fd_jacobian_rows(model, theta, h)[0]


PROBLEMS = {
    "gaussian_bumps": gaussian_bumps_problem,
    "linear": linear_problem,
}


def get_problem(name: str, **params) -> ProblemInstance:
    """Build a registered problem by id. Custom models use the Python API."""
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(
            f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}"
        ) from None
    return factory(**params)
