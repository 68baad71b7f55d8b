"""
Variational posterior families over one layer's weight matrix.

- FFG: fully-factorized Gaussian N(mu, diag(sigma^2))
- MVG: matrix-variate Gaussian with covariance V kron U, U = scale (A^g)^-1,
  V = (S^g)^-1 (column stacking puts the column factor on the left)
- EMVG: eigenvalue-corrected MVG, covariance Q diag(vec(d)) Q^T with
  Q = Q_S kron Q_A and d = scale / (r + gamma_in)

Family-generic operations (sample, log_density, kl_to_spherical_prior,
materialize_covariance, posterior_mean) dispatch on the posterior type.
"""

import math
from dataclasses import dataclass
from functools import singledispatch

import numpy as np

from src.core.fisher import DENSE_PARAM_LIMIT, KronStats, RescalingDiag
from src.core.kronlinalg import SymEig, eig_function, kron_dense, project_to_eigenbasis, vec
from src.utils.errors import ShapeError, SizeGuardError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EMVGPosterior:
    mean: np.ndarray
    eig_A: SymEig
    eig_S: SymEig
    rescaling: RescalingDiag
    scale: float

    def variance_grid(self) -> np.ndarray:
        """Per-eigendirection variances d = scale / (r + gamma_in), unvec layout."""
        return self.scale / self.rescaling.damped(intrinsic_only=True)


@dataclass(frozen=True)
class MVGPosterior:
    mean: np.ndarray
    eig_A: SymEig
    eig_S: SymEig
    row_damping: float
    col_damping: float
    pi: float
    scale: float

    @classmethod
    def from_stats(cls, mean: np.ndarray, stats: KronStats, gamma: float, scale: float) -> "MVGPosterior":
        """
        Build the noisy K-FAC posterior with pi-split damping.

        The row factor A is damped by pi*sqrt(gamma), the column factor S by
        sqrt(gamma)/pi, with pi taken from the cached eigenvalues.
        """
        stats.require_eigenbasis()
        pi = pi_damping_from_eig(stats.eig_A, stats.eig_S)
        root = math.sqrt(gamma)
        return cls(
            mean=mean,
            eig_A=stats.eig_A,
            eig_S=stats.eig_S,
            row_damping=pi * root,
            col_damping=root / pi,
            pi=pi,
            scale=scale,
        )

    def _damped_eigvals(self):
        row = self.eig_A.eigvals + self.row_damping
        col = self.eig_S.eigvals + self.col_damping
        if np.any(row <= 0) or np.any(col <= 0):
            raise ValueError("matrix-variate factor is singular after damping")
        return row, col

    def row_variances(self) -> np.ndarray:
        """Eigenvalues of the row covariance U = scale (A^g)^-1."""
        row, _ = self._damped_eigvals()
        return self.scale / row

    def col_variances(self) -> np.ndarray:
        """Eigenvalues of the column covariance V = (S^g)^-1."""
        _, col = self._damped_eigvals()
        return 1.0 / col

    def variance_grid(self) -> np.ndarray:
        return np.outer(self.row_variances(), self.col_variances())


@dataclass(frozen=True)
class FFGPosterior:
    mean: np.ndarray
    log_sigma: np.ndarray

    @property
    def variances(self) -> np.ndarray:
        return np.exp(2.0 * self.log_sigma)


def _pi_from_norms(a_norm: float, s_norm: float) -> float:
    if a_norm <= 0 or s_norm <= 0:
        return 1.0
    return (a_norm / s_norm) ** 0.25


def pi_damping(A: np.ndarray, S: np.ndarray) -> float:
    """Trace-norm ratio ((tr(A)/dim A) / (tr(S)/dim S))^(1/4) used to split damping."""
    return _pi_from_norms(np.trace(A) / A.shape[0], np.trace(S) / S.shape[0])


def pi_damping_from_eig(eig_A: SymEig, eig_S: SymEig) -> float:
    """
    ``pi_damping`` evaluated on cached eigenvalues.

    The traces come from the same decomposition the damped factors use, so pi
    only changes when the eigenbasis is refreshed.
    """
    return _pi_from_norms(float(np.mean(eig_A.eigvals)), float(np.mean(eig_S.eigvals)))


def _gaussian_log_density(projected: np.ndarray, variances: np.ndarray) -> float:
    if np.any(variances <= 0):
        raise ValueError("posterior variances must be positive")
    return float(-0.5 * np.sum(projected ** 2 / variances + np.log(variances) + LOG_2PI))


def _check_size(mean: np.ndarray) -> None:
    if mean.size > DENSE_PARAM_LIMIT:
        raise SizeGuardError(
            f"materializing a {mean.size}-parameter covariance exceeds the {DENSE_PARAM_LIMIT} limit"
        )


# --- sampling ---------------------------------------------------------------


def sample_emvg(post: EMVGPosterior, rng: np.random.Generator) -> np.ndarray:
    """Draw W = M + Q_A [X * sqrt(d)] Q_S^T with X standard normal."""
    d = post.variance_grid()
    if np.any(d < 0):
        raise ValueError("EMVG variances must be non-negative")
    X = rng.standard_normal(post.mean.shape)
    return post.mean + post.eig_A.basis @ (X * np.sqrt(d)) @ post.eig_S.basis.T


def sample_mvg(post: MVGPosterior, rng: np.random.Generator) -> np.ndarray:
    """Draw W = M + Q_A [X * sqrt(u v^T)] Q_S^T, with u, v the eigenvalues of U and V."""
    root = np.sqrt(np.outer(post.row_variances(), post.col_variances()))
    X = rng.standard_normal(post.mean.shape)
    return post.mean + post.eig_A.basis @ (X * root) @ post.eig_S.basis.T


def sample_ffg(post: FFGPosterior, rng: np.random.Generator) -> np.ndarray:
    return post.mean + np.exp(post.log_sigma) * rng.standard_normal(post.mean.shape)


@singledispatch
def sample(post, rng: np.random.Generator) -> np.ndarray:
    raise TypeError(f"unsupported posterior type {type(post).__name__}")


sample.register(EMVGPosterior, sample_emvg)
sample.register(MVGPosterior, sample_mvg)
sample.register(FFGPosterior, sample_ffg)


def posterior_mean(post) -> np.ndarray:
    return post.mean


# --- densities --------------------------------------------------------------


def emvg_log_density(post: EMVGPosterior, W: np.ndarray) -> float:
    """
    log N(vec(W); vec(M), Q diag(d) Q^T) evaluated in the eigenbasis.

    Raises:
        ValueError: if any variance d_i is not positive
    """
    if W.shape != post.mean.shape:
        raise ShapeError(f"weight shape {W.shape} does not match posterior {post.mean.shape}")
    P = project_to_eigenbasis(post.eig_A.basis, post.eig_S.basis, W - post.mean)
    return _gaussian_log_density(P, post.variance_grid())


@singledispatch
def log_density(post, W: np.ndarray) -> float:
    raise TypeError(f"unsupported posterior type {type(post).__name__}")


log_density.register(EMVGPosterior, emvg_log_density)


@log_density.register
def _(post: MVGPosterior, W: np.ndarray) -> float:
    if W.shape != post.mean.shape:
        raise ShapeError(f"weight shape {W.shape} does not match posterior {post.mean.shape}")
    P = project_to_eigenbasis(post.eig_A.basis, post.eig_S.basis, W - post.mean)
    return _gaussian_log_density(P, post.variance_grid())


@log_density.register
def _(post: FFGPosterior, W: np.ndarray) -> float:
    if W.shape != post.mean.shape:
        raise ShapeError(f"weight shape {W.shape} does not match posterior {post.mean.shape}")
    return _gaussian_log_density(W - post.mean, post.variances)


def spherical_prior_log_density(W: np.ndarray, eta: float) -> float:
    """log N(vec(W); 0, eta I)."""
    return float(-0.5 * np.sum(W ** 2 / eta + math.log(eta) + LOG_2PI))


# --- KL to N(0, eta I) ------------------------------------------------------


def _kl_from_moments(mean: np.ndarray, trace: float, logdet: float, eta: float) -> float:
    if eta <= 0:
        raise ValueError("prior variance eta must be positive")
    k = mean.size
    return 0.5 * (trace / eta + float(np.sum(mean ** 2)) / eta - k + k * math.log(eta) - logdet)


@singledispatch
def kl_to_spherical_prior(post, eta: float) -> float:
    """Closed-form KL(q || N(0, eta I)) for one layer."""
    raise TypeError(f"unsupported posterior type {type(post).__name__}")


@kl_to_spherical_prior.register
def _(post: EMVGPosterior, eta: float) -> float:
    # the orthogonal basis drops out of both trace and determinant
    d = post.variance_grid()
    if np.any(d <= 0):
        raise ValueError("EMVG variances must be positive")
    return _kl_from_moments(post.mean, float(np.sum(d)), float(np.sum(np.log(d))), eta)


@kl_to_spherical_prior.register
def _(post: MVGPosterior, eta: float) -> float:
    u, v = post.row_variances(), post.col_variances()
    n, p = u.shape[0], v.shape[0]
    trace = float(np.sum(u) * np.sum(v))
    logdet = float(p * np.sum(np.log(u)) + n * np.sum(np.log(v)))
    return _kl_from_moments(post.mean, trace, logdet, eta)


@kl_to_spherical_prior.register
def _(post: FFGPosterior, eta: float) -> float:
    return _kl_from_moments(
        post.mean, float(np.sum(post.variances)), float(np.sum(2.0 * post.log_sigma)), eta
    )


# --- dense covariance (oracle use) ------------------------------------------


@singledispatch
def materialize_covariance(post) -> np.ndarray:
    """Dense covariance of vec(W). Guarded to 2000 parameters."""
    raise TypeError(f"unsupported posterior type {type(post).__name__}")


@materialize_covariance.register
def _(post: EMVGPosterior) -> np.ndarray:
    _check_size(post.mean)
    Q = kron_dense(post.eig_S.basis, post.eig_A.basis)
    return (Q * vec(post.variance_grid())) @ Q.T


@materialize_covariance.register
def _(post: MVGPosterior) -> np.ndarray:
    _check_size(post.mean)
    U = eig_function(post.eig_A, lambda _: post.row_variances())
    V = eig_function(post.eig_S, lambda _: post.col_variances())
    return kron_dense(V, U)


@materialize_covariance.register
def _(post: FFGPosterior) -> np.ndarray:
    _check_size(post.mean)
    return np.diag(vec(post.variances))
