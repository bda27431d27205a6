import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enki.core import DimensionMismatch, ObservationSpec, cross_covariance, ensemble_mean
from enki.kalman import (
    KalmanGains,
    compute_gains,
    innovation_norm,
    perturb_observations,
    prediction_stage,
    update_stage,
)
from enki.problems import gaussian_bumps_problem, linear_model, linear_problem
from enki.solver import SolverConfig, initialize


def scalar_obs(gamma=1.0, y=0.0):
    return ObservationSpec([[1.0]], [y], gamma)


class TestPerturbObservations:
    def test_zero_noise(self, rng):
        obs = ObservationSpec([[1.0, 0.0], [0.0, 1.0]], [1.0, -2.0], np.zeros((2, 2)))
        d = perturb_observations(obs, 7, rng)
        assert np.array_equal(d, np.tile([1.0, -2.0], (7, 1)))

    def test_mean_clt(self, rng):
        d = perturb_observations(scalar_obs(1.0), 10**5, rng, center=False)
        assert abs(d.mean()) < 4 / math.sqrt(1e5)

    def test_centered_mean_exact(self, rng):
        d = perturb_observations(scalar_obs(1.0, 3.0), 1000, rng)
        assert abs(ensemble_mean(d)[0] - 3.0) < 1e-13

    @pytest.mark.parametrize("center", [True, False])
    def test_variance(self, rng, center):
        d = perturb_observations(scalar_obs(0.01), 10**5, rng, center=center)
        assert d.var() == pytest.approx(0.01, rel=0.05)

    def test_needs_two(self, rng):
        with pytest.raises(ValueError):
            perturb_observations(scalar_obs(), 1, rng)

    def test_correlated_gamma(self, rng):
        G = np.array([[1.0, 0.6], [0.6, 2.0]])
        obs = ObservationSpec(np.eye(2), [0.0, 0.0], G)
        d = perturb_observations(obs, 200_000, rng)
        np.testing.assert_allclose(cross_covariance(d), G, atol=0.03)


def _brute_force_gains(theta, x, obs):
    """Explicit inverse at 50 digits."""
    mpmath.mp.dps = 50
    J = theta.shape[0]
    T = mpmath.matrix(theta.tolist())
    X = mpmath.matrix(x.tolist())
    H = mpmath.matrix(obs.H.tolist())
    G = mpmath.matrix(obs.Gamma.tolist())

    def cov(A, B):
        ma = [sum(A[j, i] for j in range(J)) / J for i in range(A.cols)]
        mb = [sum(B[j, i] for j in range(J)) / J for i in range(B.cols)]
        C = mpmath.matrix(A.cols, B.cols)
        for i in range(A.cols):
            for k in range(B.cols):
                C[i, k] = sum((A[j, i] - ma[i]) * (B[j, k] - mb[k]) for j in range(J)) / J
        return C

    Ctx, Cxx = cov(T, X), cov(X, X)
    Sinv = (H * Cxx * H.T + G) ** -1
    K = Ctx * H.T * Sinv
    Kp = Cxx * H.T * Sinv
    to_np = lambda M: np.array([[float(M[i, j]) for j in range(M.cols)] for i in range(M.rows)])
    return to_np(K), to_np(Kp)


class TestComputeGains:
    def test_scalar_half(self):
        # C_tx = C_xx = 1 with identical two-member ensembles of spread 1
        e = np.array([[-1.0], [1.0]])
        g = compute_gains(e, e, scalar_obs(1.0))
        assert g.K[0, 0] == pytest.approx(0.5, rel=1e-15)
        assert g.K_prime[0, 0] == pytest.approx(0.5, rel=1e-15)

    def test_zero_cross_covariance(self, rng):
        theta = np.full((20, 2), 0.7)
        x = rng.standard_normal((20, 1))
        assert np.array_equal(compute_gains(theta, x, scalar_obs()).K, np.zeros((2, 1)))

    def test_brute_force_bumps_seed3(self):
        p = gaussian_bumps_problem()
        cfg = SolverConfig(seed=3)
        init_ss = np.random.SeedSequence(3).spawn(3)[0]
        st = initialize(p, cfg, np.random.default_rng(init_ss))
        g = compute_gains(st.theta_prior, st.x_prior, p.obs)
        K, Kp = _brute_force_gains(st.theta_prior, st.x_prior, p.obs)
        np.testing.assert_allclose(g.K, K, rtol=1e-9)
        np.testing.assert_allclose(g.K_prime, Kp, rtol=1e-9)

    def test_shapes(self, rng):
        obs = ObservationSpec(rng.standard_normal((3, 4)), np.zeros(3), 0.5)
        g = compute_gains(rng.standard_normal((10, 2)), rng.standard_normal((10, 4)), obs)
        assert g.K.shape == (2, 3) and g.K_prime.shape == (4, 3)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            compute_gains(rng.standard_normal((10, 2)), rng.standard_normal((10, 3)), scalar_obs())


class TestUpdateStage:
    def test_zero_innovation_keeps_priors(self, rng):
        obs = ObservationSpec([[1.0, 2.0]], [0.0], 0.3)
        theta = rng.standard_normal((15, 2))
        x = rng.standard_normal((15, 2))
        draws = x @ obs.H.T
        tp, xp = update_stage(theta, x, draws, obs)
        assert np.array_equal(tp, theta) and np.array_equal(xp, x)

    def test_given_gain(self):
        g = KalmanGains(np.array([[0.5]]), np.array([[0.5]]))
        tp, xp = update_stage(np.zeros((2, 1)), np.zeros((2, 1)), np.ones((2, 1)), scalar_obs(), g)
        assert tp[:, 0].tolist() == [0.5, 0.5]

    def test_linear_gaussian_posterior_mean(self):
        # x = F theta with F = [[1], [1]], H = I, Gamma = 0.5 I, prior N(0, 1)
        J = 10**5
        rng = np.random.default_rng(2)
        F = np.array([[1.0], [1.0]])
        obs = ObservationSpec(np.eye(2), [1.0, 0.6], 0.5)
        theta = rng.standard_normal((J, 1))
        x = theta @ F.T
        tp, _ = update_stage(theta, x, perturb_observations(obs, J, rng), obs)
        # closed form: (1 + F^T G^-1 F)^-1 F^T G^-1 y
        post_var = 1.0 / (1.0 + F.T @ np.linalg.solve(obs.Gamma, F))[0, 0]
        post_mean = post_var * (F.T @ np.linalg.solve(obs.Gamma, obs.y_bar))[0]
        assert ensemble_mean(tp)[0] == pytest.approx(post_mean, rel=0.02)

    def test_covariance_identity_frozen_obs(self, rng):
        obs = ObservationSpec([[1.0, -0.5], [0.2, 1.0]], [0.3, -0.1], np.diag([0.2, 0.4]))
        theta = rng.standard_normal((40, 3))
        x = np.tanh(theta[:, :2]) + 0.1 * theta[:, 1:]
        draws = np.tile(obs.y_bar, (40, 1))
        g = compute_gains(theta, x, obs)
        tp, _ = update_stage(theta, x, draws, obs, g)
        H, K = obs.H, g.K
        Ctt = cross_covariance(theta)
        Ctx = cross_covariance(theta, x)
        Cxx = cross_covariance(x)
        expect = Ctt - K @ H @ Ctx.T - Ctx @ H.T @ K.T + K @ H @ Cxx @ H.T @ K.T
        np.testing.assert_allclose(cross_covariance(tp), expect, rtol=1e-10, atol=1e-14)

    def test_zero_gain_identity_on_means(self, rng):
        g = KalmanGains(np.zeros((2, 1)), np.zeros((2, 1)))
        theta, x = rng.standard_normal((9, 2)), rng.standard_normal((9, 2))
        obs = ObservationSpec([[1.0, 1.0]], [0.0], 1.0)
        tp, xp = update_stage(theta, x, rng.standard_normal((9, 1)), obs, g)
        assert np.array_equal(ensemble_mean(tp), ensemble_mean(theta))

    def test_member_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            update_stage(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((4, 1)), scalar_obs())


class TestPredictionStage:
    def test_identity_model(self, rng):
        theta = rng.standard_normal((6, 2))
        st = prediction_stage(theta, linear_model(np.eye(2)), t=4)
        assert np.array_equal(st.x_prior, theta) and st.t == 5

    def test_bumps_member(self):
        p = gaussian_bumps_problem()
        st = prediction_stage(np.array([[-1.0, -1.0], [0.0, 0.0]]), p.model)
        np.testing.assert_allclose(st.x_prior[0], [1.0, math.exp(-8)], rtol=1e-15)

    def test_linear_equivalence_with_x_post(self, rng):
        F = np.array([[1.0, 0.5], [-0.3, 2.0], [0.0, 1.0]])
        model = linear_model(F)
        obs = ObservationSpec([[1.0, 0.0, 1.0]], [0.4], 0.1)
        theta = rng.standard_normal((30, 2))
        x = model(theta)
        tp, xp = update_stage(theta, x, perturb_observations(obs, 30, rng), obs)
        st = prediction_stage(tp, model)
        np.testing.assert_allclose(st.x_prior, xp, atol=1e-10)

    def test_dimension(self):
        with pytest.raises(DimensionMismatch):
            prediction_stage(np.zeros((3, 3)), gaussian_bumps_problem().model)


class TestInnovationNorm:
    def test_bumps_at_minus_one(self):
        p = gaussian_bumps_problem()
        v = innovation_norm([-1.0, -1.0], p.model, p.obs)
        assert v == pytest.approx((0.5 + math.exp(-8)) ** 2, rel=1e-14)
        assert v == pytest.approx(0.250335, abs=1e-6)

    def test_zero_when_matched(self):
        p = linear_problem(F=np.eye(2), H=np.eye(2), y_bar=[0.3, 0.7], init_mean=[0, 0])
        assert innovation_norm([0.3, 0.7], p.model, p.obs) == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), J=st.integers(3, 60), d_t=st.integers(1, 4),
       d_y=st.integers(1, 3))
def test_property_frozen_update_covariance_identity(seed, J, d_t, d_y):
    r = np.random.default_rng(seed)
    obs = ObservationSpec(r.standard_normal((d_y, 3)), r.standard_normal(d_y),
                          np.diag(r.uniform(0.1, 1.0, d_y)))
    theta = r.standard_normal((J, d_t))
    x = np.sin(theta @ r.standard_normal((d_t, 3))) + 0.1 * r.standard_normal((J, 3))
    g = compute_gains(theta, x, obs)
    tp, _ = update_stage(theta, x, np.tile(obs.y_bar, (J, 1)), obs, g)
    H, K = obs.H, g.K
    Ctx = cross_covariance(theta, x)
    Cxx = cross_covariance(x)
    expect = cross_covariance(theta) - K @ H @ Ctx.T - Ctx @ H.T @ K.T + K @ H @ Cxx @ H.T @ K.T
    scale = np.linalg.norm(cross_covariance(theta))
    assert np.linalg.norm(cross_covariance(tp) - expect) <= 1e-10 * scale + 1e-14


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), J=st.integers(2, 30), d_t=st.integers(1, 4),
       d_y=st.integers(1, 3))
def test_property_zero_gain_fixes_means(seed, J, d_t, d_y):
    r = np.random.default_rng(seed)
    obs = ObservationSpec(np.eye(d_y), np.zeros(d_y), 1.0)
    g = KalmanGains(np.zeros((d_t, d_y)), np.zeros((d_y, d_y)))
    theta, x = r.standard_normal((J, d_t)), r.standard_normal((J, d_y))
    tp, xp = update_stage(theta, x, r.standard_normal((J, d_y)), obs, g)
    assert np.array_equal(ensemble_mean(tp), ensemble_mean(theta))
    assert np.array_equal(ensemble_mean(xp), ensemble_mean(x))
