"""
Property and oracle checks across all modules.

Every check compares a structured computation against a dense or numeric
oracle on seeded random inputs. ``fast`` keeps the whole suite well under a
minute; ``full`` uses the large Monte-Carlo sample counts.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional

import numpy as np
from scipy import integrate, stats

from src.core.fisher import (
    KronStats,
    RescalingDiag,
    exact_fisher_oracle,
    kfac_eigen_rescaling,
    refresh_eigenbasis,
    update_kron_stats,
    update_rescaling,
)
from src.core.kronlinalg import kron_dense, kron_matvec, sym_eig, unvec, vec
from src.core.network import GaussianNoiseModel, Network, log_likelihood, log_likelihood_grad
from src.core.optimizers import (
    BayesByBackprop,
    damped_kron_inverses,
    ekfac_direction,
    kfac_direction,
)
from src.core.posteriors import (
    EMVGPosterior,
    FFGPosterior,
    MVGPosterior,
    emvg_log_density,
    kl_to_spherical_prior,
    log_density,
    materialize_covariance,
    sample,
    spherical_prior_log_density,
)
from src.utils.config import TrainConfig

logger = logging.getLogger(__name__)

Level = Literal["fast", "full"]
FAULTS = ("negate-rescaling",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass(frozen=True)
class Budget:
    kron_trials: int
    frobenius_trials: int
    update_trials: int
    reduction_trials: int
    cov_samples: int
    kl_samples: int
    max_eig_dim: int


BUDGETS: Dict[str, Budget] = {
    "fast": Budget(500, 100, 200, 100, 20_000, 10_000, 32),
    "full": Budget(500, 100, 200, 100, 200_000, 100_000, 64),
}


# --- random fixtures ----------------------------------------------------------


def random_psd(rng: np.random.Generator, d: int, jitter: float = 0.1) -> np.ndarray:
    G = rng.standard_normal((d, d))
    return G @ G.T / d + jitter * np.eye(d)


def random_stats(rng: np.random.Generator, n: int, p: int) -> KronStats:
    """Eigendecomposed random factors for a layer with n rows (bias included) and p columns."""
    return refresh_eigenbasis(KronStats(A=random_psd(rng, n), S=random_psd(rng, p)))


def random_emvg(
    rng: np.random.Generator, n: int, p: int, fault: Optional[str] = None
) -> EMVGPosterior:
    st = random_stats(rng, n, p)
    values = rng.uniform(0.5, 2.0, size=(n, p))
    if fault == "negate-rescaling":
        values[0, 0] = -values[0, 0]
    return EMVGPosterior(
        mean=rng.standard_normal((n, p)),
        eig_A=st.eig_A,
        eig_S=st.eig_S,
        rescaling=RescalingDiag(values=values, gamma_in=0.01),
        scale=rng.uniform(0.2, 1.0),
    )


def random_mvg(rng: np.random.Generator, n: int, p: int) -> MVGPosterior:
    return MVGPosterior.from_stats(
        rng.standard_normal((n, p)), random_stats(rng, n, p), gamma=0.05, scale=rng.uniform(0.2, 1.0)
    )


def random_ffg(rng: np.random.Generator, n: int, p: int) -> FFGPosterior:
    return FFGPosterior(mean=rng.standard_normal((n, p)), log_sigma=rng.uniform(-1.0, 0.5, size=(n, p)))


def numerical_gradient(fn: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` with respect to ``param``, perturbed in place."""
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        original = param[idx]
        param[idx] = original + h
        plus = fn()
        param[idx] = original - h
        minus = fn()
        param[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def gradients_match(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float = 1e-8) -> bool:
    return bool(np.all(np.abs(analytic - numeric) <= rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol))


def mc_covariance_matches(samples: np.ndarray, sigma: np.ndarray, rel: float = 0.05, n_se: float = 5.0) -> bool:
    """
    Compare the empirical covariance of row-vector samples with ``sigma`` on
    entries above 1% of the largest entry, allowing max(rel, n_se MC standard errors).
    """
    n = samples.shape[0]
    empirical = np.cov(samples, rowvar=False)
    diag = np.diag(sigma)
    se = np.sqrt((np.outer(diag, diag) + sigma ** 2) / n)
    mask = np.abs(sigma) > 0.01 * np.max(np.abs(sigma))
    tol = np.maximum(rel * np.abs(sigma), n_se * se)
    return bool(np.all(np.abs(empirical - sigma)[mask] <= tol[mask]))


def dense_gaussian_kl(mean: np.ndarray, sigma: np.ndarray, eta: float) -> float:
    k = mean.size
    _, logdet = np.linalg.slogdet(sigma)
    return 0.5 * (np.trace(sigma) / eta + float(mean @ mean) / eta - k + k * math.log(eta) - logdet)


# --- checks -------------------------------------------------------------------


def check_vec_roundtrip(rng, budget, fault) -> CheckResult:
    ok = all(
        np.array_equal(unvec(vec(M), 3, 5), M) for M in (rng.standard_normal((3, 5)) for _ in range(100))
    )
    return CheckResult("vec/unvec round trip", ok, "100 random 3x5 matrices, bitwise")


def check_kron_identity(rng, budget, fault) -> CheckResult:
    worst_mv, worst_eig = 0.0, 0.0
    for _ in range(budget.kron_trials):
        n, p = rng.integers(1, 7, size=2)
        A, B = rng.standard_normal((n, n)), rng.standard_normal((p, p))
        x = rng.standard_normal(n * p)
        dense = kron_dense(B, A) @ x
        worst_mv = max(worst_mv, np.linalg.norm(kron_matvec(B, A, x) - dense) / max(np.linalg.norm(dense), 1e-300))

        SA, SS = random_psd(rng, n), random_psd(rng, p)
        ea, es = sym_eig(SA), sym_eig(SS)
        expected = np.sort(np.outer(ea.eigvals, es.eigvals).ravel())
        actual = np.sort(np.linalg.eigvalsh(kron_dense(SS, SA)))
        worst_eig = max(worst_eig, np.max(np.abs(actual - expected)) / max(1.0, np.max(expected)))
    ok = worst_mv <= 1e-12 and worst_eig <= 1e-8
    return CheckResult("Kronecker identities", ok, f"matvec rel err {worst_mv:.2e}, eig err {worst_eig:.2e}")


def check_sym_eig(rng, budget, fault) -> CheckResult:
    worst_orth, worst_rec = 0.0, 0.0
    for d in range(1, budget.max_eig_dim + 1, 3):
        G = rng.standard_normal((d, d))
        M = G @ G.T
        eig = sym_eig(M, floor=-np.inf)
        worst_orth = max(worst_orth, np.max(np.abs(eig.basis.T @ eig.basis - np.eye(d))))
        worst_rec = max(worst_rec, np.max(np.abs(eig.reconstruct() - M)) / max(1.0, np.max(np.abs(M))))
    ok = worst_orth <= 1e-8 and worst_rec <= 1e-8
    return CheckResult("symmetric eigendecomposition", ok, f"orth err {worst_orth:.2e}, recon err {worst_rec:.2e}")


def _tiny_classifier(rng: np.random.Generator) -> Network:
    sizes = [int(rng.integers(2, 8)), int(rng.integers(2, 7)), int(rng.integers(2, 7))]
    return Network.build(sizes, rng, task="classification")


def check_frobenius_optimality(rng, budget, fault) -> CheckResult:
    no_worse, strict = 0, 0
    for _ in range(budget.frobenius_trials):
        net = _tiny_classifier(rng)
        x = rng.standard_normal((16, net.layers[0].n_in))
        y = rng.integers(0, net.layers[-1].n_out, size=16)
        fishers = exact_fisher_oracle(net, x, y, sampling="empirical")
        trial_ok, trial_strict = True, True
        for layer, F in zip(net.layers, fishers):
            st = refresh_eigenbasis(update_kron_stats(KronStats.identity(layer.n_in, layer.n_out), layer, 1.0))
            resc = update_rescaling(RescalingDiag.ones(layer.n_in, layer.n_out), st, layer, 1.0)
            Q = kron_dense(st.eig_S.basis, st.eig_A.basis)
            err_ekfac = np.linalg.norm(F - (Q * vec(resc.values)) @ Q.T)
            err_kfac = np.linalg.norm(F - (Q * vec(kfac_eigen_rescaling(st))) @ Q.T)
            trial_ok &= err_ekfac <= err_kfac * (1 + 1e-12) + 1e-14
            trial_strict &= err_ekfac < err_kfac * (1 - 1e-12)
        no_worse += trial_ok
        strict += trial_strict
    n = budget.frobenius_trials
    ok = no_worse == n and strict >= math.ceil(0.95 * n)
    return CheckResult("EK-FAC Frobenius optimality", ok, f"no worse {no_worse}/{n}, strictly better {strict}/{n}")


def check_rescaling_identity_basis(rng, budget, fault) -> CheckResult:
    net = Network.build([4, 3, 2], rng, task="classification")
    x = rng.standard_normal((12, 4))
    fishers = exact_fisher_oracle(net, x, rng.integers(0, 2, size=12))
    worst = 0.0
    for layer, F in zip(net.layers, fishers):
        st = KronStats.identity(layer.n_in, layer.n_out)
        resc = update_rescaling(RescalingDiag.ones(layer.n_in, layer.n_out), st, layer, 1.0)
        worst = max(worst, np.max(np.abs(vec(resc.values) - np.diag(F))))
    return CheckResult("R equals diagonal Fisher in identity basis", worst <= 1e-12, f"max err {worst:.2e}")


def check_update_oracle(rng, budget, fault) -> CheckResult:
    worst_ek, worst_k = 0.0, 0.0
    for _ in range(budget.update_trials):
        n, p = rng.integers(1, 6, size=2)
        st = random_stats(rng, n, p)
        V = rng.standard_normal((n, p))
        gamma = rng.uniform(0.01, 1.0)
        r = rng.uniform(0.0, 2.0, size=(n, p)) + gamma
        Q = kron_dense(st.eig_S.basis, st.eig_A.basis)
        dense = Q @ ((Q.T @ vec(V)) / vec(r))
        got = vec(ekfac_direction(V, st.eig_A, st.eig_S, r))
        worst_ek = max(worst_ek, np.linalg.norm(got - dense) / np.linalg.norm(dense))

        inv = damped_kron_inverses(st, gamma)
        root = math.sqrt(gamma)
        damped = kron_dense(st.S + root / inv.pi * np.eye(p), st.A + inv.pi * root * np.eye(n))
        dense_k = np.linalg.solve(damped, vec(V))
        got_k = vec(kfac_direction(V, inv))
        worst_k = max(worst_k, np.linalg.norm(got_k - dense_k) / np.linalg.norm(dense_k))
    ok = worst_ek <= 1e-10 and worst_k <= 1e-10
    return CheckResult("update derivation oracle", ok, f"EK-FAC rel err {worst_ek:.2e}, K-FAC rel err {worst_k:.2e}")


def check_reduction(rng, budget, fault) -> CheckResult:
    worst = 0.0
    for _ in range(budget.reduction_trials):
        n, p = rng.integers(1, 6, size=2)
        st = random_stats(rng, n, p)
        V = rng.standard_normal((n, p))
        gamma = rng.uniform(0.01, 1.0)
        ekfac = vec(ekfac_direction(V, st.eig_A, st.eig_S, kfac_eigen_rescaling(st) + gamma))
        exact = np.linalg.solve(kron_dense(st.S, st.A) + gamma * np.eye(n * p), vec(V))
        worst = max(worst, np.linalg.norm(ekfac - exact) / np.linalg.norm(exact))
    return CheckResult("EK-FAC reduces to exactly damped K-FAC", worst <= 1e-8, f"max rel err {worst:.2e}")


def check_emvg_generalizes_mvg(rng, budget, fault) -> CheckResult:
    n, p = 3, 2
    st = random_stats(rng, n, p)
    scale = 0.7
    emvg = EMVGPosterior(
        mean=np.zeros((n, p)), eig_A=st.eig_A, eig_S=st.eig_S,
        rescaling=RescalingDiag(values=kfac_eigen_rescaling(st)), scale=scale,
    )
    undamped = scale * np.linalg.inv(kron_dense(st.S, st.A))
    err = np.max(np.abs(materialize_covariance(emvg) - undamped)) / np.max(np.abs(undamped))
    return CheckResult("EMVG with Kronecker R equals MVG covariance", err <= 1e-10, f"max rel err {err:.2e}")


def check_covariance_psd(rng, budget, fault) -> CheckResult:
    worst = np.inf
    for _ in range(20):
        for post in (random_emvg(rng, 3, 2, fault), random_mvg(rng, 3, 2), random_ffg(rng, 3, 2)):
            worst = min(worst, float(np.min(np.linalg.eigvalsh(materialize_covariance(post)))))
    return CheckResult("posterior covariances are PSD", worst >= -1e-10, f"min eigenvalue {worst:.2e}")


def check_sampling_covariance(rng, budget, fault) -> CheckResult:
    details, ok = [], True
    for name, post in (
        ("EMVG", random_emvg(rng, 2, 3, fault)),
        ("MVG", random_mvg(rng, 2, 3)),
        ("FFG", random_ffg(rng, 2, 3)),
    ):
        draws = np.stack([vec(sample(post, rng)) for _ in range(budget.cov_samples)])
        matched = mc_covariance_matches(draws, materialize_covariance(post))
        ok &= matched
        details.append(f"{name} {'ok' if matched else 'mismatch'}")
    return CheckResult("sampling covariance", ok, f"{budget.cov_samples} samples: " + ", ".join(details))


def check_log_density(rng, budget, fault) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        for post in (random_emvg(rng, 2, 2, fault), random_mvg(rng, 2, 2), random_ffg(rng, 2, 2)):
            W = post.mean + rng.standard_normal(post.mean.shape)
            dense = stats.multivariate_normal(vec(post.mean), materialize_covariance(post)).logpdf(vec(W))
            worst = max(worst, abs(log_density(post, W) - dense))

    one = EMVGPosterior(
        mean=np.array([[0.3]]), eig_A=sym_eig(np.eye(1)), eig_S=sym_eig(np.eye(1)),
        rescaling=RescalingDiag(values=np.array([[1.5]]), gamma_in=0.1), scale=0.8,
    )
    mass, _ = integrate.quad(lambda w: math.exp(emvg_log_density(one, np.array([[w]]))), -np.inf, np.inf)
    ok = worst <= 1e-8 and abs(mass - 1.0) <= 1e-6
    return CheckResult("log-density oracle", ok, f"max abs err {worst:.2e}, 1x1 mass {mass:.8f}")


def check_kl(rng, budget, fault) -> CheckResult:
    eta = 0.8
    worst_dense, worst_mc = 0.0, 0.0
    for post in (random_emvg(rng, 2, 2, fault), random_mvg(rng, 2, 2), random_ffg(rng, 2, 2)):
        closed = kl_to_spherical_prior(post, eta)
        worst_dense = max(worst_dense, abs(closed - dense_gaussian_kl(vec(post.mean), materialize_covariance(post), eta)))
        terms = np.empty(budget.kl_samples)
        for i in range(budget.kl_samples):
            W = sample(post, rng)
            terms[i] = log_density(post, W) - spherical_prior_log_density(W, eta)
        se = terms.std(ddof=1) / math.sqrt(terms.size)
        worst_mc = max(worst_mc, abs(terms.mean() - closed) / se)
    ok = worst_dense <= 1e-8 and worst_mc <= 3.0
    return CheckResult("KL to spherical prior", ok, f"dense err {worst_dense:.2e}, MC deviation {worst_mc:.2f} SE")


def check_backprop_gradients(rng, budget, fault) -> CheckResult:
    ok = True
    noise = GaussianNoiseModel(alpha=13.0, beta=10.0)
    for task in ("regression", "classification"):
        for _ in range(3):
            depth = int(rng.integers(1, 4))
            outputs = 1 if task == "regression" else int(rng.integers(2, 5))
            sizes = [int(s) for s in rng.integers(2, 8, size=depth)] + [outputs]
            net = Network.build(sizes, rng, task=task)
            for layer in net.layers:
                layer.weights[-1] = rng.standard_normal(layer.n_out) * 0.1
            x = rng.standard_normal((5, sizes[0]))
            y = rng.standard_normal(5) if task == "regression" else rng.integers(0, outputs, size=5)
            preds = net.forward(x)
            grads = net.backward(log_likelihood_grad(task, preds, y, noise))

            def objective() -> float:
                return float(np.mean(log_likelihood(task, net.forward(x), y, noise)))

            for layer, grad in zip(net.layers, grads):
                ok &= gradients_match(grad, numerical_gradient(objective, layer.weights), rtol=1e-5)
    return CheckResult("backprop vs finite differences", ok, "regression and classification nets, depth <= 3")


def check_bbb_gradients(rng, budget, fault) -> CheckResult:
    cfg = TrainConfig(kl_weight=1.0, eta=0.5, optimizer="bbb", bbb_init_log_sigma=-1.0)
    net = Network.build([1, 1], rng)
    opt = BayesByBackprop(net, cfg, n_train=20, noise=GaussianNoiseModel(), rng=rng)
    x = rng.standard_normal((8, 1))
    y = 2.0 * x[:, 0] + 0.3 * rng.standard_normal(8)
    eps = [rng.standard_normal(m.shape) for m in opt.means]
    grad_means, grad_log_sigmas, _, _ = opt.gradients(x, y, eps)
    ok = gradients_match(grad_means[0], numerical_gradient(lambda: opt.objective(x, y, eps), opt.means[0]), 1e-4)
    ok &= gradients_match(
        grad_log_sigmas[0], numerical_gradient(lambda: opt.objective(x, y, eps), opt.log_sigmas[0]), 1e-4
    )
    return CheckResult("Bayes-by-backprop ELBO gradients", ok, "1-D model, fixed noise draw")


CHECKS: List[Callable] = [
    check_vec_roundtrip,
    check_kron_identity,
    check_sym_eig,
    check_frobenius_optimality,
    check_rescaling_identity_basis,
    check_update_oracle,
    check_reduction,
    check_emvg_generalizes_mvg,
    check_covariance_psd,
    check_sampling_covariance,
    check_log_density,
    check_kl,
    check_backprop_gradients,
    check_bbb_gradients,
]


def run_checks(level: Level = "fast", seed: int = 0, fault: Optional[str] = None) -> List[CheckResult]:
    """
    Run the whole property suite.

    Args:
        level: ``fast`` or ``full`` sample budgets
        seed: base seed; each check gets its own stream
        fault: optional fault to inject (see ``FAULTS``)

    Returns:
        One CheckResult per check; a check that raises is reported as failed
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}, expected one of {FAULTS}")
    budget = BUDGETS[level]
    results = []
    for idx, check in enumerate(CHECKS):
        rng = np.random.default_rng([seed, idx])
        started = time.perf_counter()
        try:
            result = check(rng, budget, fault)
        except Exception as e:
            logger.error("check %s raised: %s", check.__name__, e)
            result = CheckResult(check.__name__, False, f"raised {type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - started
        results.append(result)
    return results
