"""
Tests for the EMVG, MVG and FFG posterior families.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, stats

from src.core.fisher import KronStats, RescalingDiag, kfac_eigen_rescaling, refresh_eigenbasis
from src.core.kronlinalg import SymEig, kron_dense, vec
from src.core.posteriors import (
    EMVGPosterior,
    FFGPosterior,
    MVGPosterior,
    emvg_log_density,
    kl_to_spherical_prior,
    log_density,
    materialize_covariance,
    pi_damping,
    pi_damping_from_eig,
    posterior_mean,
    sample,
    spherical_prior_log_density,
)
from src.utils.errors import SizeGuardError
from src.verify.properties import (
    dense_gaussian_kl,
    mc_covariance_matches,
    random_emvg,
    random_ffg,
    random_mvg,
    random_psd,
    random_stats,
)


def identity_emvg(n: int, p: int, values: float = 1.0, gamma_in: float = 0.0, scale: float = 1.0, mean=None):
    return EMVGPosterior(
        mean=np.zeros((n, p)) if mean is None else mean,
        eig_A=SymEig(basis=np.eye(n), eigvals=np.ones(n)),
        eig_S=SymEig(basis=np.eye(p), eigvals=np.ones(p)),
        rescaling=RescalingDiag(values=np.full((n, p), values), gamma_in=gamma_in),
        scale=scale,
    )


class TestSampling:
    """Test cases for posterior sampling."""

    def test_emvg_zero_scale_returns_mean(self, rng):
        post = random_emvg(rng, 3, 2)
        post = EMVGPosterior(post.mean, post.eig_A, post.eig_S, post.rescaling, scale=0.0)
        assert_array_equal(sample(post, rng), post.mean)

    def test_emvg_unit_variance_identity_basis(self, rng):
        """Test r + gamma_in = scale in the identity basis gives W = M + X."""
        mean = rng.standard_normal((3, 2))
        post = identity_emvg(3, 2, values=0.4, gamma_in=0.1, scale=0.5, mean=mean)
        expected = mean + np.random.default_rng(7).standard_normal((3, 2))
        assert_allclose(sample(post, np.random.default_rng(7)), expected, atol=1e-12)

    def test_mvg_identity_factors(self, rng):
        mean = rng.standard_normal((2, 3))
        post = MVGPosterior.from_stats(mean, KronStats.identity(1, 3), gamma=0.0, scale=1.0)
        expected = mean + np.random.default_rng(3).standard_normal((2, 3))
        assert_allclose(sample(post, np.random.default_rng(3)), expected, atol=1e-12)

    @pytest.mark.parametrize("family", ["emvg", "mvg"])
    def test_row_permutation_equivariance(self, rng, family):
        """Test permuting the row factor and the mean permutes each sample."""
        A, S = random_psd(rng, 4), random_psd(rng, 2)
        mean = rng.standard_normal((4, 2))
        perm = np.array([2, 0, 3, 1])

        def build(A_, mean_):
            st = refresh_eigenbasis(KronStats(A=A_, S=S))
            if family == "mvg":
                return MVGPosterior.from_stats(mean_, st, gamma=0.05, scale=0.5)
            resc = RescalingDiag(values=kfac_eigen_rescaling(st), gamma_in=0.05)
            return EMVGPosterior(mean=mean_, eig_A=st.eig_A, eig_S=st.eig_S, rescaling=resc, scale=0.5)

        plain = sample(build(A, mean), np.random.default_rng(4))
        permuted = sample(build(A[np.ix_(perm, perm)], mean[perm]), np.random.default_rng(4))
        assert_allclose(permuted, plain[perm], atol=1e-10)

    def test_mvg_zero_scale(self, rng):
        post = MVGPosterior.from_stats(rng.standard_normal((3, 2)), random_stats(rng, 3, 2), gamma=0.1, scale=0.0)
        assert_allclose(sample(post, rng), post.mean)

    def test_negative_variance_rejected(self, rng):
        with pytest.raises(ValueError):
            sample(random_emvg(rng, 2, 2, fault="negate-rescaling"), rng)

    def test_unsupported_type(self, rng):
        with pytest.raises(TypeError):
            sample(object(), rng)

    def test_posterior_mean(self, rng):
        post = random_ffg(rng, 2, 3)
        assert posterior_mean(post) is post.mean

    @pytest.mark.parametrize("family", ["emvg", "mvg", "ffg"])
    def test_covariance_small_sample(self, rng, family):
        """Test the empirical covariance of 20k draws against the materialized covariance."""
        post = {"emvg": random_emvg, "mvg": random_mvg, "ffg": random_ffg}[family](rng, 2, 3)
        draws = np.stack([vec(sample(post, rng)) for _ in range(20000)])
        assert mc_covariance_matches(draws, materialize_covariance(post))
        se = np.sqrt(np.diag(materialize_covariance(post)) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - vec(post.mean)) <= 5 * se)

    @pytest.mark.slow
    @pytest.mark.parametrize("family", ["emvg", "mvg", "ffg"])
    def test_covariance_large_sample(self, rng, family):
        post = {"emvg": random_emvg, "mvg": random_mvg, "ffg": random_ffg}[family](rng, 2, 3)
        draws = np.stack([vec(sample(post, rng)) for _ in range(200000)])
        assert mc_covariance_matches(draws, materialize_covariance(post))


class TestLogDensity:
    """Test cases for log-densities."""

    def test_at_mean(self, rng):
        post = random_emvg(rng, 2, 3)
        d = post.variance_grid()
        assert_allclose(emvg_log_density(post, post.mean), -0.5 * np.sum(np.log(d) + math.log(2 * math.pi)))

    def test_scalar_layer(self):
        post = identity_emvg(1, 1, values=2.0, gamma_in=0.5, scale=0.5, mean=np.array([[0.3]]))
        expected = stats.norm(0.3, math.sqrt(0.2)).logpdf(1.1)
        assert_allclose(emvg_log_density(post, np.array([[1.1]])), expected, rtol=1e-12)

    def test_scalar_layer_integrates_to_one(self):
        post = identity_emvg(1, 1, values=1.5, gamma_in=0.1, scale=0.8, mean=np.array([[0.3]]))
        mass, _ = integrate.quad(lambda w: math.exp(emvg_log_density(post, np.array([[w]]))), -np.inf, np.inf)
        assert abs(mass - 1.0) <= 1e-6

    @pytest.mark.parametrize("family", ["emvg", "mvg", "ffg"])
    def test_matches_dense(self, rng, family):
        post = {"emvg": random_emvg, "mvg": random_mvg, "ffg": random_ffg}[family](rng, 2, 2)
        for _ in range(5):
            W = post.mean + rng.standard_normal((2, 2))
            dense = stats.multivariate_normal(vec(post.mean), materialize_covariance(post)).logpdf(vec(W))
            assert_allclose(log_density(post, W), dense, atol=1e-8)

    def test_prior_log_density(self, rng):
        W = rng.standard_normal((2, 3))
        expected = stats.multivariate_normal(np.zeros(6), 0.7 * np.eye(6)).logpdf(vec(W))
        assert_allclose(spherical_prior_log_density(W, 0.7), expected)


class TestKL:
    """Test cases for the KL divergence to the spherical prior."""

    def test_ffg_standard(self):
        """Test mu=1, sigma^2=1, eta=1 gives KL 0.5."""
        post = FFGPosterior(mean=np.array([[1.0]]), log_sigma=np.array([[0.0]]))
        assert_allclose(kl_to_spherical_prior(post, 1.0), 0.5)

    def test_equal_to_prior(self):
        eta = 0.6
        ffg = FFGPosterior(mean=np.zeros((2, 2)), log_sigma=np.full((2, 2), 0.5 * math.log(eta)))
        emvg = identity_emvg(2, 2, values=1.0, gamma_in=0.0, scale=eta)
        assert_allclose(kl_to_spherical_prior(ffg, eta), 0.0, atol=1e-12)
        assert_allclose(kl_to_spherical_prior(emvg, eta), 0.0, atol=1e-12)

    @pytest.mark.parametrize("family", ["emvg", "mvg", "ffg"])
    def test_matches_dense(self, rng, family):
        post = {"emvg": random_emvg, "mvg": random_mvg, "ffg": random_ffg}[family](rng, 2, 2)
        dense = dense_gaussian_kl(vec(post.mean), materialize_covariance(post), 1.3)
        assert_allclose(kl_to_spherical_prior(post, 1.3), dense, atol=1e-8)

    def test_invalid_eta(self, rng):
        with pytest.raises(ValueError):
            kl_to_spherical_prior(random_ffg(rng, 1, 1), 0.0)

    @pytest.mark.slow
    @pytest.mark.parametrize("family", ["emvg", "mvg", "ffg"])
    def test_monte_carlo(self, rng, family):
        """Test E_q[log q - log p] over 1e5 samples within 3 standard errors."""
        post = {"emvg": random_emvg, "mvg": random_mvg, "ffg": random_ffg}[family](rng, 2, 2)
        terms = np.empty(100000)
        for i in range(terms.size):
            W = sample(post, rng)
            terms[i] = log_density(post, W) - spherical_prior_log_density(W, 1.0)
        se = terms.std(ddof=1) / math.sqrt(terms.size)
        assert abs(terms.mean() - kl_to_spherical_prior(post, 1.0)) <= 3 * se


class TestCovariance:
    """Test cases for dense covariances and damping."""

    def test_identity(self):
        assert_allclose(materialize_covariance(identity_emvg(2, 3)), np.eye(6))

    def test_emvg_with_kronecker_grid_equals_mvg(self, rng):
        stats_ = random_stats(rng, 3, 2)
        emvg = EMVGPosterior(
            mean=np.zeros((3, 2)), eig_A=stats_.eig_A, eig_S=stats_.eig_S,
            rescaling=RescalingDiag(values=kfac_eigen_rescaling(stats_)), scale=0.4,
        )
        mvg = MVGPosterior.from_stats(np.zeros((3, 2)), stats_, gamma=0.0, scale=0.4)
        assert_allclose(materialize_covariance(emvg), materialize_covariance(mvg), rtol=1e-10, atol=1e-12)

    def test_mvg_covariance_ordering(self, rng):
        """Test the column factor sits on the left of the Kronecker product."""
        stats_ = random_stats(rng, 3, 2)
        mvg = MVGPosterior.from_stats(np.zeros((3, 2)), stats_, gamma=0.0, scale=1.0)
        expected = np.linalg.inv(kron_dense(stats_.S, stats_.A))
        assert_allclose(materialize_covariance(mvg), expected, rtol=1e-8, atol=1e-12)

    @pytest.mark.parametrize("family", ["emvg", "mvg", "ffg"])
    def test_psd(self, rng, family):
        post = {"emvg": random_emvg, "mvg": random_mvg, "ffg": random_ffg}[family](rng, 3, 2)
        assert np.min(np.linalg.eigvalsh(materialize_covariance(post))) >= -1e-10

    def test_size_guard(self):
        with pytest.raises(SizeGuardError):
            materialize_covariance(FFGPosterior(mean=np.zeros((50, 50)), log_sigma=np.zeros((50, 50))))

    def test_pi_damping(self):
        assert_allclose(pi_damping(4.0 * np.eye(2), np.eye(3)), math.sqrt(2.0))
        assert_allclose(pi_damping(np.eye(2), 9.0 * np.eye(2)), 1.0 / math.sqrt(3.0))
        assert pi_damping(np.zeros((2, 2)), np.eye(2)) == 1.0

    def test_pi_from_cached_eigenvalues(self, rng):
        stats_ = random_stats(rng, 3, 2)
        assert_allclose(pi_damping_from_eig(stats_.eig_A, stats_.eig_S), pi_damping(stats_.A, stats_.S))
        mvg = MVGPosterior.from_stats(np.zeros((3, 2)), stats_, gamma=0.04, scale=1.0)
        assert mvg.pi == pi_damping_from_eig(stats_.eig_A, stats_.eig_S)

    def test_mvg_damping_split(self, rng):
        stats_ = random_stats(rng, 3, 2)
        mvg = MVGPosterior.from_stats(np.zeros((3, 2)), stats_, gamma=0.04, scale=1.0)
        assert_allclose(mvg.row_damping * mvg.col_damping, 0.04)
        assert_allclose(mvg.row_damping / mvg.col_damping, mvg.pi ** 2)


if __name__ == "__main__":
    pytest.main([__file__])
