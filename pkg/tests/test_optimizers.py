"""
Tests for the natural-gradient preconditioners, optimizers and ELBO estimate.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from src.core.fisher import KronStats, RescalingDiag, kfac_eigen_rescaling
from src.core.kronlinalg import SymEig, kron_dense, sym_eig, unvec, vec
from src.core.network import GaussianNoiseModel, Network, log_likelihood
from src.core.optimizers import (
    BayesByBackprop,
    EKFACOptimizer,
    KFACOptimizer,
    damped_kron_inverses,
    ekfac_direction,
    estimate_elbo,
    kfac_direction,
    make_optimizer,
)
from src.core.posteriors import EMVGPosterior, FFGPosterior, sample
from src.utils.config import TrainConfig
from src.utils.errors import TrainingDivergedError
from src.verify.properties import gradients_match, numerical_gradient, random_stats


def build(optimizer: str, rng, sizes=(3, 4, 1), n_train: int = 50, **cfg_values):
    values = {"lambda": 1.0, "optimizer": optimizer, **cfg_values}
    if optimizer in ("ekfac", "kfac"):
        values.setdefault("gamma_ex", 0.01)
    cfg = TrainConfig.model_validate(values)
    net = Network.build(list(sizes), rng)
    return make_optimizer(net, cfg, n_train, GaussianNoiseModel(), rng)


class TestPreconditioners:
    """Test cases for the EK-FAC and K-FAC directions."""

    def test_ekfac_identity_is_sgd(self, rng):
        stats_ = KronStats.identity(2, 3)
        V = rng.standard_normal((3, 3))
        assert_allclose(ekfac_direction(V, stats_.eig_A, stats_.eig_S, np.ones((3, 3))), V)

    def test_ekfac_zero_gradient(self, rng):
        stats_ = random_stats(rng, 3, 2)
        assert_allclose(ekfac_direction(np.zeros((3, 2)), stats_.eig_A, stats_.eig_S, np.ones((3, 2))), 0.0)

    def test_ekfac_dense_oracle(self, rng):
        """Test the direction equals Q (R^g)^-1 Q^T vec(V)."""
        stats_ = random_stats(rng, 4, 3)
        V = rng.standard_normal((4, 3))
        r = rng.uniform(0.1, 2.0, size=(4, 3))
        Q = kron_dense(stats_.eig_S.basis, stats_.eig_A.basis)
        dense = Q @ ((Q.T @ vec(V)) / vec(r))
        assert_allclose(vec(ekfac_direction(V, stats_.eig_A, stats_.eig_S, r)), dense, rtol=1e-10, atol=1e-12)

    def test_kfac_identity_is_sgd(self, rng):
        V = rng.standard_normal((3, 2))
        assert_allclose(kfac_direction(V, damped_kron_inverses(KronStats.identity(2, 2), 0.0)), V)

    def test_kfac_dense_oracle(self, rng):
        """Test the direction equals the dense damped Kronecker inverse."""
        stats_ = random_stats(rng, 3, 2)
        gamma = 0.3
        inv = damped_kron_inverses(stats_, gamma)
        damped = kron_dense(
            stats_.S + math.sqrt(gamma) / inv.pi * np.eye(2), stats_.A + inv.pi * math.sqrt(gamma) * np.eye(3)
        )
        V = rng.standard_normal((3, 2))
        assert_allclose(vec(kfac_direction(V, inv)), np.linalg.solve(damped, vec(V)), rtol=1e-10, atol=1e-12)

    def test_reduction_to_exactly_damped_kfac(self, rng):
        """Test EK-FAC with the Kronecker eigenvalue grid solves (S kron A + gamma I)."""
        stats_ = random_stats(rng, 3, 3)
        V = rng.standard_normal((3, 3))
        gamma = 0.05
        direction = ekfac_direction(V, stats_.eig_A, stats_.eig_S, kfac_eigen_rescaling(stats_) + gamma)
        exact = np.linalg.solve(kron_dense(stats_.S, stats_.A) + gamma * np.eye(9), vec(V))
        assert_allclose(vec(direction), exact, rtol=1e-8, atol=1e-12)

    def test_quadratic_one_step(self, rng):
        """Test one undamped natural-gradient step on 1/2 w^T H w lands on the optimum."""
        stats_ = random_stats(rng, 3, 2)
        H = kron_dense(stats_.S, stats_.A)
        W0 = rng.standard_normal((3, 2))
        V = unvec(-H @ vec(W0), 3, 2)
        W_ekfac = W0 + ekfac_direction(V, stats_.eig_A, stats_.eig_S, kfac_eigen_rescaling(stats_))
        W_kfac = W0 + kfac_direction(V, damped_kron_inverses(stats_, 0.0))
        assert_allclose(W_ekfac, 0.0, atol=1e-8)
        assert_allclose(W_kfac, 0.0, atol=1e-8)


class TestKroneckerOptimizers:
    """Test cases for the EK-FAC and K-FAC optimizer classes."""

    def test_factory(self, rng):
        assert isinstance(build("noisy-ekfac", rng), EKFACOptimizer)
        assert isinstance(build("kfac", rng), KFACOptimizer)
        assert isinstance(build("bbb", rng), BayesByBackprop)
        assert build("ekfac", rng).name == "ekfac"
        assert build("noisy-kfac", rng).name == "noisy-kfac"

    def test_intrinsic_damping(self, rng):
        opt = build("noisy-ekfac", rng, n_train=40, eta=0.5, **{"lambda": 2.0})
        assert_allclose(opt.gamma_in, 2.0 / (40 * 0.5))
        assert_allclose(opt.scale, 2.0 / 40)

    def test_point_estimate_has_no_intrinsic_damping(self, rng):
        opt = build("ekfac", rng)
        assert opt.gamma_in == 0.0 and opt.scale == 0.0
        assert_allclose(opt.gamma, 0.01)

    def test_zero_direction_keeps_means(self, rng):
        opt = build("noisy-ekfac", rng)
        for idx, mean in enumerate(opt.means):
            assert_allclose(opt.precondition(idx, np.zeros_like(mean)), 0.0)

    @pytest.mark.parametrize("name", ["noisy-ekfac", "noisy-kfac", "ekfac", "kfac"])
    def test_step_report(self, rng, name):
        opt = build(name, rng)
        x, y = rng.standard_normal((10, 3)), rng.standard_normal(10)
        report = opt.step(x, y, 0, 0.01)
        assert report.iteration == 0
        assert report.alpha == 0.01
        assert len(report.grad_norms) == 2
        assert math.isfinite(report.elbo)
        if name in ("ekfac", "kfac"):
            assert report.kl_term == 0.0
            assert report.elbo == report.ll_term
        else:
            assert report.kl_term > 0.0

    def test_first_step_reinitializes_rescaling(self, rng):
        """Test iteration 0 leaves R equal to the K-FAC eigenvalue grid."""
        opt = build("noisy-ekfac", rng)
        opt.step(rng.standard_normal((10, 3)), rng.standard_normal(10), 0, 0.01)
        for stats_, resc in zip(opt.stats, opt.rescaling):
            assert_allclose(resc.values, kfac_eigen_rescaling(stats_))
            assert stats_.updates_since_eig == 0

    def test_rescaling_tracks_projected_gradients_between_refreshes(self, rng):
        opt = build("noisy-ekfac", rng, t_eig=3, t_reinit=100)
        x, y = rng.standard_normal((10, 3)), rng.standard_normal(10)
        for k in range(5):
            opt.step(x, y, k, 0.01)
        assert [s.updates_since_eig for s in opt.stats] == [1, 1]
        for stats_, resc in zip(opt.stats, opt.rescaling):
            assert not np.allclose(resc.values, kfac_eigen_rescaling(stats_))

    def test_model_sampled_fisher(self, rng):
        opt = build("noisy-ekfac", rng, fisher_sampling="model")
        report = opt.step(rng.standard_normal((10, 3)), rng.standard_normal(10), 0, 0.01)
        assert math.isfinite(report.elbo)

    def test_small_lambda_matches_point_estimate(self):
        """Test noisy EK-FAC with lambda -> 0 follows the EK-FAC trajectory."""
        data_rng = np.random.default_rng(0)
        x, y = data_rng.standard_normal((10, 3)), data_rng.standard_normal(10)
        noisy = build("noisy-ekfac", np.random.default_rng(5), gamma_ex=0.01, **{"lambda": 1e-14})
        point = build("ekfac", np.random.default_rng(5), gamma_ex=0.01)
        for k in range(3):
            noisy.step(x, y, k, 0.05)
            point.step(x, y, k, 0.05)
        for a, b in zip(noisy.means, point.means):
            assert_allclose(a, b, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("name", ["noisy-ekfac", "noisy-kfac", "ekfac", "kfac"])
    def test_input_permutation_invariance(self, name):
        """Test permuted inputs with permuted first-layer means yield the same predictions."""
        data_rng = np.random.default_rng(11)
        x = data_rng.standard_normal((30, 3))
        y = np.tanh(x @ np.array([1.0, -0.5, 0.3])) + 0.1 * data_rng.standard_normal(30)
        perm = np.array([2, 0, 1])
        rows = np.append(perm, 3)
        plain = build(name, np.random.default_rng(5))
        permuted = build(name, np.random.default_rng(5))
        permuted.means[0] = plain.means[0][rows].copy()
        for k in range(15):
            batch = slice(10 * (k % 3), 10 * (k % 3) + 10)
            plain.step(x[batch], y[batch], k, 0.02)
            permuted.step(x[batch][:, perm], y[batch], k, 0.02)
        plain.net.set_weights(plain.means)
        permuted.net.set_weights(permuted.means)
        assert_allclose(permuted.net.forward(x[:, perm]), plain.net.forward(x), atol=1e-8)

    def test_first_step_keeps_identity_factors(self, rng):
        """Test aligning the initial eigenbasis leaves the factors and counters untouched."""
        opt = build("noisy-ekfac", rng)
        x, y = rng.standard_normal((10, 3)), rng.standard_normal(10)
        opt._align_initial_eigenbasis(x, y)
        for stats_ in opt.stats:
            assert_allclose(stats_.eig_A.reconstruct(), np.eye(stats_.A.shape[0]), atol=1e-12)
            assert_allclose(stats_.eig_S.reconstruct(), np.eye(stats_.S.shape[0]), atol=1e-12)
            assert stats_.stats_updates == 0
        assert opt._align_pending is False

    def test_posterior_pi_follows_eigenbasis(self, rng):
        """Test the MVG posterior and the preconditioner share pi between refreshes."""
        opt = build("noisy-kfac", rng, t_eig=3)
        x, y = rng.standard_normal((10, 3)), rng.standard_normal(10)
        for k in range(5):
            opt.step(x, y, k, 0.01)
        for post, inverses, stats_ in zip(opt.posteriors(), opt.inverses, opt.stats):
            assert stats_.updates_since_eig == 1
            assert post.pi == inverses.pi

    @pytest.mark.parametrize("name", ["noisy-ekfac", "noisy-kfac", "ekfac", "kfac"])
    def test_diverged_step_restores_curvature(self, rng, name):
        opt = build(name, rng)
        x, y = rng.standard_normal((10, 3)), rng.standard_normal(10)
        opt.step(x, y, 0, 0.01)
        saved = opt.curvature_state()
        means = [m.copy() for m in opt.means]
        opt.precondition = lambda idx, V: np.full_like(V, np.nan)
        with pytest.raises(TrainingDivergedError):
            opt.step(x, y, 1, 0.01)
        for attr, values in saved.items():
            assert all(a is b for a, b in zip(getattr(opt, attr), values))
        for a, b in zip(opt.means, means):
            assert_allclose(a, b)

    def test_divergence_guard_halves_once(self, rng):
        opt = build("noisy-ekfac", rng)
        params = [np.array([1e308])]
        assert opt._guarded_update(params, [np.array([1e308])], 1.0, 0) == 0.5
        assert np.isfinite(params[0]).all()

    def test_divergence_guard_raises(self, rng):
        opt = build("noisy-ekfac", rng)
        with pytest.raises(TrainingDivergedError):
            opt._guarded_update([np.zeros(2)], [np.array([np.nan, 0.0])], 0.1, 3)


class TestBayesByBackprop:
    """Test cases for the reparameterized FFG optimizer."""

    @pytest.fixture
    def bbb(self, rng):
        return build("bbb", rng, sizes=(1, 1), n_train=20, eta=0.5, bbb_init_log_sigma=-1.0)

    def test_finite_differences(self, bbb, rng):
        """Test the ELBO gradients against finite differences on a 1-D model."""
        x = rng.standard_normal((8, 1))
        y = 2.0 * x[:, 0] + 0.3 * rng.standard_normal(8)
        eps = [rng.standard_normal(m.shape) for m in bbb.means]
        grad_means, grad_log_sigmas, _, _ = bbb.gradients(x, y, eps)
        fd_means = numerical_gradient(lambda: bbb.objective(x, y, eps), bbb.means[0])
        fd_sigmas = numerical_gradient(lambda: bbb.objective(x, y, eps), bbb.log_sigmas[0])
        assert gradients_match(grad_means[0], fd_means, rtol=1e-4)
        assert gradients_match(grad_log_sigmas[0], fd_sigmas, rtol=1e-4)

    def test_kl_gradient_vanishes_at_prior(self, bbb, rng):
        bbb.means = [np.zeros_like(m) for m in bbb.means]
        bbb.log_sigmas = [np.full_like(m, 0.5 * math.log(0.5)) for m in bbb.means]
        x, y = rng.standard_normal((4, 1)), rng.standard_normal(4)
        eps = [rng.standard_normal(m.shape) for m in bbb.means]
        grad_means, grad_log_sigmas, grads, _ = bbb.gradients(x, y, eps)
        sigma = math.sqrt(0.5)
        assert_allclose(grad_means[0], grads[0], atol=1e-15)
        assert_allclose(grad_log_sigmas[0], grads[0] * eps[0] * sigma, atol=1e-12)

    def test_vanishing_sigma_is_sgd(self, bbb, rng):
        """Test a near-zero sigma makes the mean update plain gradient ascent."""
        bbb.log_sigmas = [np.full_like(m, -30.0) for m in bbb.means]
        x, y = rng.standard_normal((6, 1)), rng.standard_normal(6)
        before = bbb.means[0].copy()
        bbb.net.set_weights([before])
        grad = bbb.net.backward(
            GaussianNoiseModel().precision * (y[:, None] - bbb.net.forward(x))
        )[0]
        bbb.step(x, y, 0, 0.1)
        assert_allclose(bbb.means[0], before + 0.1 * (grad - bbb.scale * before / 0.5), atol=1e-10)

    def test_log_sigma_floor(self, bbb, rng):
        bbb.log_sigmas = [np.full_like(m, -10.0) for m in bbb.means]
        bbb.step(rng.standard_normal((4, 1)), rng.standard_normal(4), 0, 1.0)
        assert np.all(bbb.log_sigmas[0] >= -10.0)


class TestEstimateElbo:
    """Test cases for the Monte-Carlo ELBO."""

    def test_deterministic_posterior_without_kl(self, rng):
        opt = build("ekfac", rng)
        x, y = rng.standard_normal((12, 3)), rng.standard_normal(12)
        noise = GaussianNoiseModel()
        elbo = estimate_elbo(opt.net, opt.posteriors(), x, y, noise, 0.0, 1.0, 3, rng)
        opt.net.set_weights(opt.means)
        assert_allclose(elbo, np.sum(log_likelihood("regression", opt.net.forward(x), y, noise)))

    def test_prior_has_zero_kl(self, rng):
        net = Network.build([2, 1], rng)
        prior = [FFGPosterior(mean=np.zeros((3, 1)), log_sigma=np.zeros((3, 1)))]
        x, y = rng.standard_normal((5, 2)), rng.standard_normal(5)
        noise = GaussianNoiseModel()
        with_kl = estimate_elbo(net, prior, x, y, noise, 1.0, 1.0, 4, np.random.default_rng(9))
        without = estimate_elbo(net, prior, x, y, noise, 0.0, 1.0, 4, np.random.default_rng(9))
        assert_allclose(with_kl, without, atol=1e-12)

    def test_rejects_zero_samples(self, rng):
        with pytest.raises(ValueError):
            estimate_elbo(Network.build([1, 1], rng), [], np.zeros((1, 1)), np.zeros(1), None, 0.0, 1.0, 0, rng)

    def test_conjugate_evidence(self, rng):
        """Test the ELBO at the exact Bayesian linear-regression posterior equals the log evidence."""
        eta, noise = 2.0, GaussianNoiseModel(alpha=4.0, beta=1.0)
        tau = noise.precision
        x = rng.standard_normal((20, 1))
        y = 1.5 * x[:, 0] - 0.5 + rng.standard_normal(20) / math.sqrt(tau)
        a = np.hstack([x, np.ones((20, 1))])
        precision = np.eye(2) / eta + tau * a.T @ a
        mean = np.linalg.solve(precision, tau * a.T @ y)[:, None]
        eig = sym_eig(precision)
        post = EMVGPosterior(
            mean=mean,
            eig_A=eig,
            eig_S=SymEig(basis=np.eye(1), eigvals=np.ones(1)),
            rescaling=RescalingDiag(values=eig.eigvals[:, None]),
            scale=1.0,
        )
        net = Network.build([1, 1], rng)
        log_evidence = stats.multivariate_normal(np.zeros(20), eta * a @ a.T + np.eye(20) / tau).logpdf(y)

        draws = []
        for _ in range(2000):
            net.set_weights([sample(post, rng)])
            draws.append(np.sum(log_likelihood("regression", net.forward(x), y, noise)))
        n_mc = 4000
        se = np.std(draws, ddof=1) / math.sqrt(n_mc)
        elbo = estimate_elbo(net, [post], x, y, noise, 1.0, eta, n_mc, rng)
        assert abs(elbo - log_evidence) <= 4 * se


if __name__ == "__main__":
    pytest.main([__file__])
