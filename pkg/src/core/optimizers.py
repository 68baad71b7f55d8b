"""
Natural-gradient optimizers over a :class:`Network`.

- ``EKFACOptimizer``: EK-FAC, and noisy EK-FAC (EMVG posterior) when ``noisy``
- ``KFACOptimizer``: K-FAC with pi-split damping, and noisy K-FAC (MVG posterior)
- ``BayesByBackprop``: reparameterized gradient ascent on a fully-factorized Gaussian

All updates ascend log-likelihood: M <- M + alpha * precond(V) with
V = grad log p - gamma_in * W. Momentum is zero.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.fisher import (
    KronStats,
    RescalingDiag,
    align_identity_eigenbasis,
    refresh_eigenbasis,
    reinit_rescaling,
    update_kron_stats,
    update_rescaling,
)
from src.core.kronlinalg import SymEig, eig_function, project_from_eigenbasis, project_to_eigenbasis
from src.core.network import (
    GaussianNoiseModel,
    Network,
    log_likelihood,
    log_likelihood_grad,
    sample_targets,
)
from src.core.posteriors import (
    EMVGPosterior,
    FFGPosterior,
    MVGPosterior,
    kl_to_spherical_prior,
    pi_damping_from_eig,
    sample,
)
from src.core.state import StepReport
from src.utils.config import TrainConfig
from src.utils.errors import TrainingDivergedError

logger = logging.getLogger(__name__)

LOG_SIGMA_FLOOR = -10.0


# --- preconditioners ----------------------------------------------------------


def ekfac_direction(V: np.ndarray, eig_A: SymEig, eig_S: SymEig, damped_r: np.ndarray) -> np.ndarray:
    """
    EK-FAC preconditioned direction Q_A [(Q_A^T V Q_S) / r] Q_S^T.

    This equals unvec(Q R^-1 Q^T vec(V)) with Q = Q_S kron Q_A and
    diag(R) = vec(damped_r).
    """
    projected = project_to_eigenbasis(eig_A.basis, eig_S.basis, V)
    return project_from_eigenbasis(eig_A.basis, eig_S.basis, projected / damped_r)


@dataclass(frozen=True)
class KronInverses:
    """Damped inverses [A^g]^-1 and [S^g]^-1 with the pi used to split the damping."""

    A_inv: np.ndarray
    S_inv: np.ndarray
    pi: float


def damped_kron_inverses(stats: KronStats, gamma: float) -> KronInverses:
    """Invert A + pi*sqrt(gamma) I and S + sqrt(gamma)/pi I through their eigendecompositions."""
    stats.require_eigenbasis()
    pi = pi_damping_from_eig(stats.eig_A, stats.eig_S)
    root = math.sqrt(gamma)
    return KronInverses(
        A_inv=eig_function(stats.eig_A, lambda lam: 1.0 / (lam + pi * root)),
        S_inv=eig_function(stats.eig_S, lambda lam: 1.0 / (lam + root / pi)),
        pi=pi,
    )


def kfac_direction(V: np.ndarray, inverses: KronInverses) -> np.ndarray:
    """K-FAC direction [A^g]^-1 V [S^g]^-1, i.e. unvec((S^g kron A^g)^-1 vec(V))."""
    return inverses.A_inv @ V @ inverses.S_inv


# --- ELBO ---------------------------------------------------------------------


def estimate_elbo(
    net: Network,
    posteriors: Sequence,
    x: np.ndarray,
    y: np.ndarray,
    noise: Optional[GaussianNoiseModel],
    kl_weight: float,
    eta: float,
    n_mc: int,
    rng: np.random.Generator,
) -> float:
    """
    Monte-Carlo ELBO: E_q[log p(D | w)] - lambda * sum_l KL(q_l || N(0, eta I)).

    The KL term is skipped when ``kl_weight`` is zero so degenerate
    (zero-variance) posteriors can be scored.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    total = 0.0
    for _ in range(n_mc):
        net.set_weights([sample(post, rng) for post in posteriors])
        total += float(np.sum(log_likelihood(net.task, net.forward(x), y, noise)))
    expected_ll = total / n_mc
    if kl_weight == 0:
        return expected_ll
    kl = sum(kl_to_spherical_prior(post, eta) for post in posteriors)
    return expected_ll - kl_weight * kl


# --- optimizers ---------------------------------------------------------------


class VariationalOptimizer(ABC):
    """
    Base class for all optimizers.

    The optimizer owns its network exclusively. ``noise`` may be replaced
    between steps by the caller (per-epoch precision updates).
    """

    name: str = "base"

    def __init__(
        self,
        net: Network,
        cfg: TrainConfig,
        n_train: int,
        noise: Optional[GaussianNoiseModel],
        rng: np.random.Generator,
        noisy: bool = True,
    ):
        if n_train < 1:
            raise ValueError("n_train must be positive")
        self.net = net
        self.cfg = cfg
        self.n_train = n_train
        self.noise = noise
        self.rng = rng
        self.noisy = noisy
        self.means: List[np.ndarray] = net.get_weights()
        self.gamma_in = cfg.kl_weight / (n_train * cfg.eta) if noisy else 0.0
        self.scale = cfg.kl_weight / n_train if noisy else 0.0

    @abstractmethod
    def posteriors(self) -> List:
        """Current per-layer variational posteriors."""

    @abstractmethod
    def step(self, x: np.ndarray, y: np.ndarray, k: int, alpha: float) -> StepReport:
        """Run iteration ``k`` on one mini-batch with step size ``alpha``."""

    def kl_term(self, posteriors: Sequence) -> float:
        if not self.noisy:
            return 0.0
        return float(sum(kl_to_spherical_prior(post, self.cfg.eta) for post in posteriors))

    def _report(
        self,
        k: int,
        predictions: np.ndarray,
        y: np.ndarray,
        kl: float,
        grads: Sequence[np.ndarray],
        alpha: float,
    ) -> StepReport:
        batch_ll = log_likelihood(self.net.task, predictions, y, self.noise)
        ll_term = float(self.n_train * np.mean(batch_ll))
        weight = self.cfg.kl_weight if self.noisy else 0.0
        return StepReport(
            iteration=k,
            elbo=ll_term - weight * kl,
            ll_term=ll_term,
            kl_term=kl,
            alpha=alpha,
            grad_norms=[float(np.linalg.norm(g)) for g in grads],
        )

    def _guarded_update(
        self, params: List[np.ndarray], directions: Sequence[np.ndarray], alpha: float, k: int
    ) -> float:
        """
        Apply params += alpha * directions in place, halving alpha once if the
        result is non-finite.

        Returns:
            The step size actually used

        Raises:
            TrainingDivergedError: if the halved step is still non-finite
        """
        for attempt in range(2):
            candidate = [p + alpha * d for p, d in zip(params, directions)]
            if all(np.all(np.isfinite(c)) for c in candidate):
                params[:] = candidate
                return alpha
            if attempt == 0:
                logger.warning(
                    "%s iteration %d produced non-finite parameters, retrying with alpha=%g",
                    self.name, k, alpha * 0.5,
                )
                alpha *= 0.5
        raise TrainingDivergedError(
            f"{self.name} iteration {k}: parameters stay non-finite after halving alpha"
        )


class KroneckerOptimizer(VariationalOptimizer):
    """
    Shared natural-gradient pipeline: sample, curvature update, precondition, update.

    A step that diverges leaves the curvature state as it was before the step.
    """

    curvature_attrs: Tuple[str, ...] = ("stats",)

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.stats: List[KronStats] = [
            KronStats.identity(layer.n_in, layer.n_out) for layer in self.net.layers
        ]
        self._align_pending = self.noisy

    def curvature_state(self) -> Dict[str, list]:
        """Shallow copy of the curvature lists; their entries are immutable."""
        return {name: list(getattr(self, name)) for name in self.curvature_attrs}

    def restore_curvature(self, state: Dict[str, list]) -> None:
        for name, values in state.items():
            setattr(self, name, values)

    def _align_initial_eigenbasis(self, x: np.ndarray, y: np.ndarray) -> None:
        # first samples are drawn in the first batch's eigenbasis instead of the canonical one
        self.net.set_weights([m.copy() for m in self.means])
        predictions = self.net.forward(x)
        self.net.backward(log_likelihood_grad(self.net.task, predictions, y, self.noise))
        self.stats = [
            align_identity_eigenbasis(stats, layer, self.cfg.beta)
            for stats, layer in zip(self.stats, self.net.layers)
        ]
        self._align_pending = False

    @property
    def gamma(self) -> float:
        """Total damping used for preconditioning."""
        return self.gamma_in + self.cfg.gamma_ex

    @abstractmethod
    def update_curvature(self, k: int) -> None:
        """Refresh statistics from the caches of the latest backward pass."""

    @abstractmethod
    def precondition(self, idx: int, V: np.ndarray) -> np.ndarray:
        """Natural-gradient direction for layer ``idx``."""

    def step(self, x: np.ndarray, y: np.ndarray, k: int, alpha: float) -> StepReport:
        if self._align_pending:
            self._align_initial_eigenbasis(x, y)
        saved = self.curvature_state()
        try:
            return self._step(x, y, k, alpha)
        except TrainingDivergedError:
            self.restore_curvature(saved)
            raise

    def _step(self, x: np.ndarray, y: np.ndarray, k: int, alpha: float) -> StepReport:
        posteriors = self.posteriors()
        weights = [sample(post, self.rng) for post in posteriors] if self.noisy else [
            m.copy() for m in self.means
        ]
        self.net.set_weights(weights)
        predictions = self.net.forward(x)

        if self.cfg.fisher_sampling == "model":
            sampled = sample_targets(self.net.task, predictions, self.noise, self.rng)
            self.net.backward(log_likelihood_grad(self.net.task, predictions, sampled, self.noise))
            self.update_curvature(k)
            grads = self.net.backward(log_likelihood_grad(self.net.task, predictions, y, self.noise))
        else:
            grads = self.net.backward(log_likelihood_grad(self.net.task, predictions, y, self.noise))
            self.update_curvature(k)

        directions = [
            self.precondition(idx, grad - self.gamma_in * w)
            for idx, (grad, w) in enumerate(zip(grads, weights))
        ]
        used_alpha = self._guarded_update(self.means, directions, alpha, k)
        return self._report(k, predictions, y, self.kl_term(posteriors), grads, used_alpha)


class EKFACOptimizer(KroneckerOptimizer):
    """EK-FAC; with ``noisy=True`` this is noisy EK-FAC fitting an EMVG posterior."""

    curvature_attrs = ("stats", "rescaling")

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.name = "noisy-ekfac" if self.noisy else "ekfac"
        self.rescaling: List[RescalingDiag] = [
            RescalingDiag.ones(layer.n_in, layer.n_out, self.gamma_in, self.cfg.gamma_ex)
            for layer in self.net.layers
        ]

    def posteriors(self) -> List[EMVGPosterior]:
        return [
            EMVGPosterior(
                mean=mean,
                eig_A=stats.eig_A,
                eig_S=stats.eig_S,
                rescaling=resc,
                scale=self.scale,
            )
            for mean, stats, resc in zip(self.means, self.stats, self.rescaling)
        ]

    def update_curvature(self, k: int) -> None:
        cfg = self.cfg
        for idx, layer in enumerate(self.net.layers):
            if k % cfg.t_stats == 0:
                self.stats[idx] = update_kron_stats(self.stats[idx], layer, cfg.beta)
            if k % cfg.t_scale == 0:
                self.rescaling[idx] = update_rescaling(
                    self.rescaling[idx], self.stats[idx], layer, cfg.omega, max_staleness=cfg.t_eig
                )
            if k % cfg.t_eig == 0:
                self.stats[idx] = refresh_eigenbasis(self.stats[idx])
                logger.debug("layer %d eigenbasis refreshed at iteration %d", idx, k)
            if k % cfg.t_reinit == 0:
                self.rescaling[idx] = reinit_rescaling(self.rescaling[idx], self.stats[idx])

    def precondition(self, idx: int, V: np.ndarray) -> np.ndarray:
        stats = self.stats[idx]
        return ekfac_direction(V, stats.eig_A, stats.eig_S, self.rescaling[idx].damped())


class KFACOptimizer(KroneckerOptimizer):
    """K-FAC; with ``noisy=True`` this is noisy K-FAC fitting an MVG posterior."""

    curvature_attrs = ("stats", "inverses")

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.name = "noisy-kfac" if self.noisy else "kfac"
        self.inverses: List[KronInverses] = [
            damped_kron_inverses(stats, self.gamma) for stats in self.stats
        ]

    def posteriors(self) -> List[MVGPosterior]:
        return [
            MVGPosterior.from_stats(mean, stats, self.gamma_in, self.scale)
            for mean, stats in zip(self.means, self.stats)
        ]

    def update_curvature(self, k: int) -> None:
        cfg = self.cfg
        for idx, layer in enumerate(self.net.layers):
            if k % cfg.t_stats == 0:
                self.stats[idx] = update_kron_stats(self.stats[idx], layer, cfg.beta)
            if k % cfg.t_eig == 0:
                self.stats[idx] = refresh_eigenbasis(self.stats[idx])
                self.inverses[idx] = damped_kron_inverses(self.stats[idx], self.gamma)

    def precondition(self, idx: int, V: np.ndarray) -> np.ndarray:
        return kfac_direction(V, self.inverses[idx])


class BayesByBackprop(VariationalOptimizer):
    """Fully-factorized Gaussian posterior trained with the reparameterization trick."""

    name = "bbb"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.log_sigmas = [
            np.full_like(mean, self.cfg.bbb_init_log_sigma) for mean in self.means
        ]

    def posteriors(self) -> List[FFGPosterior]:
        return [FFGPosterior(mean=m, log_sigma=s) for m, s in zip(self.means, self.log_sigmas)]

    def objective(self, x: np.ndarray, y: np.ndarray, eps: Sequence[np.ndarray]) -> float:
        """Per-datum ELBO for fixed noise: mean_i log p_i(w) - (lambda/N) KL(q || p)."""
        weights = [m + np.exp(s) * e for m, s, e in zip(self.means, self.log_sigmas, eps)]
        self.net.set_weights(weights)
        ll = float(np.mean(log_likelihood(self.net.task, self.net.forward(x), y, self.noise)))
        kl = sum(kl_to_spherical_prior(post, self.cfg.eta) for post in self.posteriors())
        return ll - self.scale * kl

    def gradients(self, x: np.ndarray, y: np.ndarray, eps: Sequence[np.ndarray]):
        """
        Gradients of :meth:`objective` with respect to the means and log sigmas.

        Returns:
            Tuple of (mean gradients, log-sigma gradients, log-likelihood
            gradients, network predictions)
        """
        sigmas = [np.exp(s) for s in self.log_sigmas]
        weights = [m + sd * e for m, sd, e in zip(self.means, sigmas, eps)]
        self.net.set_weights(weights)
        predictions = self.net.forward(x)
        grads = self.net.backward(log_likelihood_grad(self.net.task, predictions, y, self.noise))
        eta = self.cfg.eta
        grad_means = [g - self.scale * m / eta for g, m in zip(grads, self.means)]
        grad_log_sigmas = [
            g * e * sd - self.scale * (sd ** 2 / eta - 1.0)
            for g, e, sd in zip(grads, eps, sigmas)
        ]
        return grad_means, grad_log_sigmas, grads, predictions

    def step(self, x: np.ndarray, y: np.ndarray, k: int, alpha: float) -> StepReport:
        posteriors = self.posteriors()
        kl = self.kl_term(posteriors)
        eps = [self.rng.standard_normal(m.shape) for m in self.means]
        grad_means, grad_log_sigmas, grads, predictions = self.gradients(x, y, eps)

        params = self.means + self.log_sigmas
        used_alpha = self._guarded_update(params, grad_means + grad_log_sigmas, alpha, k)
        n_layers = len(self.means)
        self.means = params[:n_layers]
        self.log_sigmas = [np.maximum(s, LOG_SIGMA_FLOOR) for s in params[n_layers:]]
        return self._report(k, predictions, y, kl, grads, used_alpha)


def make_optimizer(
    net: Network,
    cfg: TrainConfig,
    n_train: int,
    noise: Optional[GaussianNoiseModel],
    rng: np.random.Generator,
) -> VariationalOptimizer:
    """Instantiate the optimizer named by ``cfg.optimizer``."""
    name = cfg.optimizer
    if name == "noisy-ekfac":
        return EKFACOptimizer(net, cfg, n_train, noise, rng, noisy=True)
    if name == "ekfac":
        return EKFACOptimizer(net, cfg, n_train, noise, rng, noisy=False)
    if name == "noisy-kfac":
        return KFACOptimizer(net, cfg, n_train, noise, rng, noisy=True)
    if name == "kfac":
        return KFACOptimizer(net, cfg, n_train, noise, rng, noisy=False)
    if name == "bbb":
        return BayesByBackprop(net, cfg, n_train, noise, rng, noisy=True)
    raise ValueError(f"unknown optimizer {name!r}")
