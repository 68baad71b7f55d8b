"""
Kronecker factor statistics, the EK-FAC re-scaling diagonal and a dense
Fisher oracle.

All update functions are pure: they return new objects so a caller can
swap (eigenbasis, R) pairs atomically.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Literal, Optional

import numpy as np

from src.core.kronlinalg import SymEig, project_to_eigenbasis, sym_eig, vec
from src.core.network import (
    GaussianNoiseModel,
    LayerState,
    Network,
    log_likelihood_grad,
    per_example_gradients,
    sample_targets,
)
from src.utils.errors import ShapeError, SizeGuardError, StaleEigenbasisError

logger = logging.getLogger(__name__)

FisherSampling = Literal["empirical", "model"]

DENSE_PARAM_LIMIT = 2000


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class KronStats:
    """Running Kronecker factors A = E[a a^T], S = E[g g^T] of one layer."""

    A: np.ndarray
    S: np.ndarray
    eig_A: Optional[SymEig] = None
    eig_S: Optional[SymEig] = None
    stats_updates: int = 0
    updates_since_eig: int = 0

    @classmethod
    def identity(cls, n_in: int, n_out: int) -> "KronStats":
        """Identity factors with the canonical eigenbasis."""
        return cls(
            A=np.eye(n_in + 1),
            S=np.eye(n_out),
            eig_A=SymEig(basis=np.eye(n_in + 1), eigvals=np.ones(n_in + 1)),
            eig_S=SymEig(basis=np.eye(n_out), eigvals=np.ones(n_out)),
        )

    @property
    def has_eigenbasis(self) -> bool:
        return self.eig_A is not None and self.eig_S is not None

    def require_eigenbasis(self) -> None:
        if not self.has_eigenbasis:
            raise StaleEigenbasisError("Kronecker eigenbasis has not been computed")


@dataclass(frozen=True)
class RescalingDiag:
    """
    Diagonal re-scaling matrix R in the Kronecker eigenbasis.

    ``values`` stores diag(R) as an (n_in + 1) x n_out grid (unvec layout).
    """

    values: np.ndarray
    gamma_in: float = 0.0
    gamma_ex: float = 0.0

    def __post_init__(self):
        if self.gamma_in < 0 or self.gamma_ex < 0:
            raise ValueError("damping terms must be non-negative")

    @classmethod
    def ones(cls, n_in: int, n_out: int, gamma_in: float = 0.0, gamma_ex: float = 0.0) -> "RescalingDiag":
        return cls(values=np.ones((n_in + 1, n_out)), gamma_in=gamma_in, gamma_ex=gamma_ex)

    @property
    def gamma(self) -> float:
        """Total damping gamma_in + gamma_ex."""
        return self.gamma_in + self.gamma_ex

    def damped(self, intrinsic_only: bool = False) -> np.ndarray:
        """R plus gamma_in (sampling) or plus the total damping (preconditioning)."""
        return self.values + (self.gamma_in if intrinsic_only else self.gamma)

    def validate(self) -> None:
        """
        Raises:
            ValueError: if any entry is negative or non-finite
        """
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("re-scaling diagonal must be finite and non-negative")


def update_kron_stats(stats: KronStats, layer: LayerState, rate: float) -> KronStats:
    """
    Exponential moving average update of A and S from one batch.

    Args:
        stats: current factors
        layer: layer with fresh caches
        rate: EMA weight of the new batch, in [0, 1]

    Returns:
        Updated factors; eigendecompositions are left as they were
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"stats rate must lie in [0, 1], got {rate}")
    layer.check_fresh()
    a, g = layer.inputs, layer.preact_grads
    if a.shape[1] != stats.A.shape[0] or g.shape[1] != stats.S.shape[0]:
        raise ShapeError("layer caches do not match the Kronecker factor sizes")
    if rate == 0.0:
        return stats
    batch = a.shape[0]
    A = _symmetrize((1.0 - rate) * stats.A + rate * (a.T @ a) / batch)
    S = _symmetrize((1.0 - rate) * stats.S + rate * (g.T @ g) / batch)
    return replace(
        stats,
        A=A,
        S=S,
        stats_updates=stats.stats_updates + 1,
        updates_since_eig=stats.updates_since_eig + 1,
    )


def refresh_eigenbasis(stats: KronStats) -> KronStats:
    """Recompute the eigendecompositions of A and S."""
    return replace(stats, eig_A=sym_eig(stats.A), eig_S=sym_eig(stats.S), updates_since_eig=0)


def align_identity_eigenbasis(stats: KronStats, layer: LayerState, rate: float) -> KronStats:
    """
    Replace the eigenvectors of untouched identity factors with the ones the
    next refresh would compute from ``layer``'s batch.

    Every orthonormal basis decomposes the identity, so A, S, the eigenvalues
    and the counters stay as they are.

    Raises:
        ValueError: if the factors have already absorbed statistics
    """
    if stats.stats_updates:
        raise ValueError("only untouched identity factors can have their eigenbasis aligned")
    target = refresh_eigenbasis(update_kron_stats(stats, layer, rate))
    return replace(
        stats,
        eig_A=SymEig(basis=target.eig_A.basis, eigvals=stats.eig_A.eigvals),
        eig_S=SymEig(basis=target.eig_S.basis, eigvals=stats.eig_S.eigvals),
    )


def projected_second_moment(stats: KronStats, layer: LayerState) -> np.ndarray:
    """Batch mean of squared per-example gradients expressed in the eigenbasis."""
    stats.require_eigenbasis()
    projected = project_to_eigenbasis(
        stats.eig_A.basis, stats.eig_S.basis, per_example_gradients(layer)
    )
    return np.mean(projected ** 2, axis=0)


def update_rescaling(
    resc: RescalingDiag,
    stats: KronStats,
    layer: LayerState,
    rate: float,
    max_staleness: Optional[int] = None,
) -> RescalingDiag:
    """
    EMA update of diag(R) with per-example gradients projected into the
    current eigenbasis.

    Args:
        resc: current re-scaling diagonal
        stats: factors with a current eigenbasis
        layer: layer with fresh caches
        rate: EMA weight of the new batch
        max_staleness: reject the update if the eigenbasis is older than
            this many statistics updates

    Raises:
        StaleEigenbasisError: if the eigenbasis is missing or too old
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"re-scaling rate must lie in [0, 1], got {rate}")
    stats.require_eigenbasis()
    if max_staleness is not None and stats.updates_since_eig > max_staleness:
        raise StaleEigenbasisError(
            f"eigenbasis is {stats.updates_since_eig} statistics updates old "
            f"(limit {max_staleness})"
        )
    moment = projected_second_moment(stats, layer)
    if moment.shape != resc.values.shape:
        raise ShapeError("re-scaling grid does not match the layer shape")
    return replace(resc, values=(1.0 - rate) * resc.values + rate * moment)


def kfac_eigen_rescaling(stats: KronStats) -> np.ndarray:
    """K-FAC eigenvalue grid Lambda_A Lambda_S^T, i.e. unvec(diag(Lambda_S kron Lambda_A))."""
    stats.require_eigenbasis()
    return np.outer(stats.eig_A.eigvals, stats.eig_S.eigvals)


def reinit_rescaling(resc: RescalingDiag, stats: KronStats) -> RescalingDiag:
    """Overwrite R with the K-FAC eigenvalues, which amounts to one K-FAC iteration."""
    return replace(resc, values=kfac_eigen_rescaling(stats))


def exact_fisher_oracle(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    sampling: FisherSampling = "empirical",
    noise: Optional[GaussianNoiseModel] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[np.ndarray]:
    """
    Dense per-layer Fisher E[vec(G_i) vec(G_i)^T] from per-example gradients.

    Args:
        net: network whose current weights define the model
        x: input batch
        y: dataset targets, used when ``sampling == "empirical"``
        sampling: ``empirical`` uses dataset labels, ``model`` draws one
            label per input from the predictive distribution
        noise: noise model for regression
        rng: generator for model sampling

    Returns:
        One dense (n_in+1)*n_out square matrix per layer

    Raises:
        SizeGuardError: if any layer has more than 2000 parameters
    """
    for layer in net.layers:
        if layer.weights.size > DENSE_PARAM_LIMIT:
            raise SizeGuardError(
                f"dense Fisher of a layer with {layer.weights.size} parameters exceeds "
                f"the {DENSE_PARAM_LIMIT} limit"
            )
    predictions = net.forward(x)
    if sampling == "model":
        if rng is None:
            raise ValueError("model-sampled Fisher needs a random generator")
        targets = sample_targets(net.task, predictions, noise, rng)
    else:
        targets = y
    net.backward(log_likelihood_grad(net.task, predictions, targets, noise))

    fishers = []
    for layer in net.layers:
        grads = per_example_gradients(layer)
        flat = np.stack([vec(g) for g in grads])
        fishers.append(flat.T @ flat / flat.shape[0])
    return fishers
