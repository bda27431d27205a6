"""The iteration driver: update, optional resampling, prediction, stopping rules."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .core import Divisor, EnkiError, principal_sqrt
from .diagnostics import IterationRecord, SteadyStateReport, record_iteration, steady_state_check
from .kalman import (
    IterationState,
    compute_gains,
    perturb_observations,
    prediction_stage,
    update_stage,
)
from .problems import ProblemInstance
from .resampling import ResamplingPolicy, moment_matched_resample

__all__ = [
    "Status",
    "SolverConfig",
    "SolverResult",
    "IterationFailure",
    "NonFiniteError",
    "initialize",
    "run",
    "detect_fixed_point",
]


class Status(str, enum.Enum):
    CONVERGED = "converged_innovation"
    EARLY_STOPPED = "early_stopped"
    MAX_ITERATIONS = "max_iterations"


class IterationFailure(EnkiError):
    """A numerical failure inside the loop, tagged with the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class NonFiniteError(IterationFailure):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Run settings.

    ``perturb_observations=False`` replaces every observation draw by
    ``y_bar`` (deterministic updates). ``update_only`` skips the prediction
    stage, feeding the posterior state ensemble straight into the next
    update. The early-stopping detector fires once ``||K||_F`` stays below
    ``stagnation_gain_eps`` for ``stagnation_window`` consecutive iterations.
    """

    n_members: int = 100
    tol: float = 1e-4
    max_iter: int = 5000
    seed: int = 0
    resampling: ResamplingPolicy = field(default_factory=ResamplingPolicy)
    fixed_perturbations: bool = False
    perturb_observations: bool = True
    update_only: bool = False
    covariance_divisor: Divisor = Divisor.POPULATION
    stagnation_window: int = 50
    stagnation_gain_eps: float = 1e-9

    def __post_init__(self):
        if isinstance(self.resampling, str):
            object.__setattr__(self, "resampling", ResamplingPolicy.from_string(self.resampling))
        object.__setattr__(self, "covariance_divisor", Divisor(self.covariance_divisor))
        self.validate()

    def validate(self) -> None:
        if int(self.n_members) != self.n_members or self.n_members < 2:
            raise ValueError("n_members must be an integer >= 2")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError("max_iter must be an integer >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.stagnation_window < 2:
            raise ValueError("stagnation_window must be >= 2")
        if not self.stagnation_gain_eps >= 0:
            raise ValueError("stagnation_gain_eps must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.update_only and self.resampling.enabled:
            raise ValueError("update_only cannot be combined with resampling")

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        """Inverse of :meth:`to_dict`; ``resampling`` may be a string plus ``rank_tol``."""
        d = dict(d)
        rank_tol = d.pop("rank_tol", 1e-12)
        res = d.pop("resampling", "off")
        if isinstance(res, str):
            res = ResamplingPolicy.from_string(res, rank_tol)
        return cls(resampling=res, **d)

    def replace(self, **changes) -> "SolverConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ResamplingPolicy):
                out["resampling"] = v.label()
                out["rank_tol"] = v.rank_tol
            elif isinstance(v, enum.Enum):
                out[f.name] = v.value
            else:
                out[f.name] = v
        return out


@dataclass
class SolverResult:
    theta_hat: np.ndarray
    status: Status
    iterations: int
    trace: list[IterationRecord]
    steady_state: Optional[SteadyStateReport] = None
    fixed_point: Optional[int] = None

    @property
    def final_innovation(self) -> float:
        return self.trace[-1].innovation

    def summary(self) -> dict:
        return {
            "status": self.status.value,
            "iterations": self.iterations,
            "theta_hat": [float(v) for v in self.theta_hat],
            "final_innovation": self.final_innovation,
            "fixed_point": self.fixed_point,
            "steady_state": None if self.steady_state is None else self.steady_state.to_dict(),
        }


def initialize(problem: ProblemInstance, config: SolverConfig,
               rng: np.random.Generator) -> IterationState:
    """Draw the first prior ensemble ``theta ~ N(init_mean, init_cov)``, ``x = f(theta)``."""
    S, _ = principal_sqrt(problem.init_cov)
    xi = rng.standard_normal((config.n_members, problem.model.d_theta))
    theta = problem.init_mean + xi @ S.T
    return IterationState(theta, problem.model.evaluate(theta), 1)


def _check_finite(name: str, a, t: int) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {name}", t)


def run(problem: ProblemInstance, config: SolverConfig) -> SolverResult:
    """Iterate until the squared innovation drops below ``tol``, the gain
    stagnates, or ``max_iter`` is reached.

    Independent generator streams for initialization, observation draws
    and resampling are spawned from ``config.seed``, so toggling resampling
    does not change the initial ensemble or observation draws.
    """
    config.validate()
    model, obs = problem.model, problem.obs
    divisor = config.covariance_divisor
    policy = config.resampling
    J = config.n_members
    init_ss, obs_ss, res_ss = np.random.SeedSequence(int(config.seed)).spawn(3)
    obs_rng = np.random.default_rng(obs_ss)
    res_rng = np.random.default_rng(res_ss)

    state = initialize(problem, config, np.random.default_rng(init_ss))
    _check_finite("initial ensemble", state.x_prior, 0)
    frozen = None
    if not config.perturb_observations:
        frozen = np.broadcast_to(obs.y_bar, (J, obs.d_y)).copy()

    trace: list[IterationRecord] = []
    status = Status.MAX_ITERATIONS
    low_gain = 0
    for t in range(1, config.max_iter + 1):
        try:
            if frozen is not None:
                draws = frozen
            else:
                draws = perturb_observations(obs, J, obs_rng)
                if config.fixed_perturbations:
                    frozen = draws
            gains = compute_gains(state.theta_prior, state.x_prior, obs, divisor)
            theta_post, x_post = update_stage(
                state.theta_prior, state.x_prior, draws, obs, gains, divisor
            )
            _check_finite("posterior ensemble", theta_post, t)

            x_pred = theta_r = x_r = report = None
            if policy.enabled:
                x_pred = model.evaluate(theta_post)
                theta_r, report = moment_matched_resample(theta_post, policy, res_rng, divisor)
                _check_finite("resampled ensemble", theta_r, t)
                x_r = model.evaluate(theta_r)
                nxt = IterationState(theta_r, x_r, t + 1)
            elif config.update_only:
                nxt = IterationState(theta_post, x_post, t + 1)
            else:
                nxt = prediction_stage(theta_post, model, t)
            _check_finite("predicted state ensemble", nxt.x_prior, t)

            rec = record_iteration(
                t, state.theta_prior, state.x_prior, gains, theta_post, x_post, obs, model,
                x_pred=x_pred, theta_resampled=theta_r, x_resampled=x_r,
                resample_report=report, divisor=divisor,
            )
        except IterationFailure:
            raise
        except (EnkiError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise IterationFailure(str(exc), t) from exc
        if not rec.is_finite():
            raise NonFiniteError("non-finite diagnostics", t)
        trace.append(rec)
        state = nxt

        if rec.innovation < config.tol:
            status = Status.CONVERGED
            break
        low_gain = low_gain + 1 if rec.norm_K < config.stagnation_gain_eps else 0
        if low_gain >= config.stagnation_window:
            status = Status.EARLY_STOPPED
            break

    fp = detect_fixed_point(trace)
    at = trace[-1] if fp is None else next(r for r in trace if r.t == fp)
    steady = steady_state_check(at.x_prior_mean, at.x_post_mean, at.C_xx, obs)
    return SolverResult(
        theta_hat=trace[-1].theta_mean.copy(),
        status=status,
        iterations=len(trace),
        trace=trace,
        steady_state=steady,
        fixed_point=fp,
    )


def detect_fixed_point(trace, tol: float = 1e-10, window: int = 10) -> Optional[int]:
    """First ``t`` after which the posterior mean moves less than ``tol`` for
    ``window`` consecutive iterations, or ``None``."""
    if len(trace) == 0:
        raise ValueError("trace is empty")
    means = np.array([r.theta_mean for r in trace])
    if len(trace) <= window:
        return None
    small = np.linalg.norm(np.diff(means, axis=0), axis=1) < tol
    # small[i] covers the step from record i to i + 1
    run = 0
    for i in range(len(small) - 1, -1, -1):
        run = run + 1 if small[i] else 0
        small[i] = run >= window
    hits = np.flatnonzero(small)
    return None if hits.size == 0 else int(trace[hits[0]].t)

