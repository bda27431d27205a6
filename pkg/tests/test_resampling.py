import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enki.core import cross_covariance, ensemble_mean, frobenius_norm
from enki.resampling import (
    KURTOSIS,
    Base,
    Mode,
    MomentMatchedResampler,
    RankDeficientResample,
    ResamplingPolicy,
    moment_matched_resample,
    resample_deviation_stats,
    sample_base,
)

BASES = list(Base)


def policy(base="gaussian"):
    return ResamplingPolicy(Mode.EVERY_ITERATION, base)


def kurtosis(z):
    dz = z - z.mean(axis=0)
    return np.mean(dz**4, axis=0) / np.mean(dz**2, axis=0) ** 2


class TestPolicy:
    @pytest.mark.parametrize("name", ["uniform", "gaussian", "laplace"])
    def test_from_string_on(self, name):
        p = ResamplingPolicy.from_string(name)
        assert p.enabled and p.base is Base(name) and p.label() == name

    def test_off(self):
        p = ResamplingPolicy.from_string("off")
        assert not p.enabled and p.label() == "off"

    def test_unknown(self):
        with pytest.raises(ValueError):
            ResamplingPolicy.from_string("cauchy")


class TestSampleBase:
    def test_uniform_support(self, rng):
        z = sample_base("uniform", 100_000, 1, rng)
        assert np.abs(z).max() <= np.sqrt(3.0)
        assert np.abs(z).max() == pytest.approx(1.7320508, abs=1e-3)

    def test_laplace_scale(self):
        from enki.resampling import LAPLACE_SCALE

        assert LAPLACE_SCALE == pytest.approx(0.7071068, abs=1e-7)
        assert 2 * LAPLACE_SCALE**2 == pytest.approx(1.0, rel=1e-15)

    @pytest.mark.parametrize("base", BASES)
    def test_standardized(self, rng, base):
        z = sample_base(base, 400_000, 2, rng)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=0.01)
        np.testing.assert_allclose(z.var(axis=0), 1.0, rtol=0.02)

    def test_laplace_kurtosis_million(self):
        z = sample_base("laplace", 10**6, 1, np.random.default_rng(0))
        assert abs(kurtosis(z)[0] - 6.0) < 0.3

    @pytest.mark.parametrize("seed", range(5))
    def test_kurtosis_ordering(self, seed):
        r = np.random.default_rng(seed)
        k = {b: kurtosis(sample_base(b, 10**4, 1, r))[0] for b in BASES}
        assert k[Base.UNIFORM] + 0.5 < k[Base.GAUSSIAN] < k[Base.LAPLACE] - 0.5

    def test_theoretical_values(self):
        assert [KURTOSIS[b] for b in BASES] == [1.8, 3.0, 6.0]


class TestMomentMatchedResample:
    def test_off_is_identity(self, rng):
        theta = rng.standard_normal((10, 2))
        out, rep = moment_matched_resample(theta, ResamplingPolicy(), rng)
        assert np.array_equal(out, theta) and rep.mean_error == 0.0 and rep.sigma_sq == 0.0

    def test_constant_ensemble_unchanged(self, rng):
        theta = np.tile([1.5, -2.0], (12, 1))
        out, rep = moment_matched_resample(theta, policy(), rng)
        assert np.array_equal(out, theta) and rep.rank == 0

    def test_seed5_covariance_oracle(self):
        r = np.random.default_rng(5)
        theta = r.standard_normal((200, 2)) @ np.array([[1.0, 0.3], [0.0, 0.5]]) + [2.0, -1.0]
        out, _ = moment_matched_resample(theta, policy(), r)
        # direct recomputation with numpy's own estimator
        C_in = np.cov(theta.T, bias=True)
        C_out = np.cov(out.T, bias=True)
        assert np.linalg.norm(C_out - C_in) < 1e-10
        np.testing.assert_allclose(out.mean(axis=0), theta.mean(axis=0), atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(3, 60),
        st.integers(1, 6),
        st.sampled_from(BASES),
        st.integers(0, 2**32 - 1),
        st.floats(-50, 50),
        st.floats(1e-4, 1e2),
    )
    def test_moments_preserved(self, J, d, base, seed, shift, scale):
        r = np.random.default_rng(seed)
        theta = shift + scale * r.standard_normal((J, d)) @ r.standard_normal((d, d))
        out, rep = moment_matched_resample(theta, policy(base), r)
        m, C = ensemble_mean(theta), cross_covariance(theta)
        assert rep.mean_error <= 1e-12 * (1 + np.linalg.norm(m))
        assert rep.cov_error <= 1e-10 * (1 + frobenius_norm(C))
        assert np.linalg.norm(ensemble_mean(out) - m) <= 1e-12 * (1 + np.linalg.norm(m))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 40), st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_rank_preserved(self, J, d, seed):
        r = np.random.default_rng(seed)
        k = min(d - 1, J - 1)
        theta = r.standard_normal((J, k)) @ r.standard_normal((k, d))
        out, rep = moment_matched_resample(theta, policy(), r)
        lam_in = np.linalg.eigvalsh(cross_covariance(theta))
        lam_out = np.linalg.eigvalsh(cross_covariance(out))
        tol = 1e-9 * lam_in[-1]
        assert (lam_in > tol).sum() == (lam_out > tol).sum() == rep.rank

    def test_report_fields(self, rng):
        theta = rng.standard_normal((50, 3)) * [1.0, 2.0, 3.0]
        C = cross_covariance(theta)
        _, rep = moment_matched_resample(theta, policy("laplace"), rng)
        assert rep.sigma_sq == pytest.approx(np.trace(C), rel=1e-14)
        assert rep.sigma_sq_max == pytest.approx(np.linalg.eigvalsh(C)[-1], rel=1e-12)
        assert rep.raw_kurtosis.shape == (3,)

    def test_rank_deficient_error(self):
        class Degenerate:
            """Generator stand-in whose draws all coincide."""

            def standard_normal(self, shape):
                return np.ones(shape)

        theta = np.random.default_rng(0).standard_normal((10, 2))
        with pytest.raises(RankDeficientResample):
            moment_matched_resample(theta, policy(), Degenerate())

    def test_deterministic(self):
        theta = np.random.default_rng(3).standard_normal((30, 2))
        a, _ = moment_matched_resample(theta, policy("uniform"), np.random.default_rng(9))
        b, _ = moment_matched_resample(theta, policy("uniform"), np.random.default_rng(9))
        assert np.array_equal(a, b)


class TestDeviationStats:
    def test_zero(self, rng):
        e = rng.standard_normal((5, 2))
        assert resample_deviation_stats(e, e) == 0.0

    @pytest.mark.parametrize("var, expected", [(1.0, 2.0), (4.0, 8.0)])
    def test_twice_sigma_sq(self, var, expected):
        r = np.random.default_rng(4)
        theta = np.sqrt(var) * r.standard_normal((10**5, 1))
        out, _ = moment_matched_resample(theta, policy(), r)
        assert resample_deviation_stats(theta, out) == pytest.approx(expected, rel=0.05)


class TestEstimator:
    def test_fit_resample(self, rng):
        X = rng.standard_normal((40, 3))
        est = MomentMatchedResampler(base="uniform", random_state=0)
        Xr = est.fit_resample(X)
        np.testing.assert_allclose(est.covariance_, cross_covariance(X))
        assert est.report_.cov_error < 1e-10
        assert Xr.shape == X.shape and not np.array_equal(Xr, X)

    def test_get_params(self):
        est = MomentMatchedResampler(base="laplace", rank_tol=1e-10)
        assert est.get_params() == {"base": "laplace", "rank_tol": 1e-10, "random_state": None}

    def test_reproducible(self, rng):
        X = rng.standard_normal((20, 2))
        a = MomentMatchedResampler(random_state=1).fit_resample(X)
        b = MomentMatchedResampler(random_state=1).fit_resample(X)
        assert np.array_equal(a, b)
