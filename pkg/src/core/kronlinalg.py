"""
Dense small-matrix linear algebra for Kronecker-factored curvature.

All matrices are float64 numpy arrays. The vec convention is column
stacking throughout the package: vec(M)[i + j*n] == M[i, j]. Under this
convention (B kron A) vec(X) == vec(A X B^T).
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from src.utils.errors import NonFiniteError, ShapeError

EIG_FLOOR = 1e-10


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition Q diag(eigvals) Q^T of a symmetric PSD matrix.

    Eigenvalues are sorted descending and clamped to ``EIG_FLOOR``.
    """

    basis: np.ndarray
    eigvals: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigvals.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.eigvals) @ self.basis.T


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stack a matrix into a vector."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"vec expects a 2-D matrix, got shape {m.shape}")
    return m.reshape(-1, order="F")


def unvec(v: np.ndarray, n: int, p: int) -> np.ndarray:
    """Inverse of :func:`vec`: rebuild an n x p matrix from its column stack."""
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] != n * p:
        raise ShapeError(f"unvec cannot reshape vector of shape {v.shape} into {n}x{p}")
    return v.reshape((n, p), order="F")


def kron_matvec(B: np.ndarray, A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """
    Compute (B kron A) x without materializing the Kronecker product.

    Args:
        B: p x p matrix
        A: n x n matrix
        x: vector of length n*p

    Returns:
        vec(A unvec(x) B^T)
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ShapeError(f"kron_matvec needs square factors, got {A.shape} and {B.shape}")
    n, p = A.shape[0], B.shape[0]
    X = unvec(x, n, p)
    return vec(A @ X @ B.T)


def kron_dense(B: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Materialize B kron A. Only meant for oracles on small layers."""
    return np.kron(B, A)


def sym_eig(m: np.ndarray, floor: float = EIG_FLOOR) -> SymEig:
    """
    Eigendecompose a symmetric PSD matrix deterministically.

    The input is symmetrized as (M + M^T)/2. Eigenvalues are sorted
    descending (stable on ties), each eigenvector's largest-magnitude entry
    is made positive, and eigenvalues below ``floor`` are raised to it.

    Args:
        m: d x d symmetric matrix
        floor: clamp floor for eigenvalues

    Returns:
        SymEig with orthogonal basis and clamped eigenvalues

    Raises:
        ShapeError: if m is not square
        NonFiniteError: if m contains NaN or Inf
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"sym_eig expects a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("sym_eig received a matrix with non-finite entries")

    sym = 0.5 * (m + m.T)
    eigvals, basis = scipy.linalg.eigh(sym)

    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    basis = basis[:, order]

    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    basis = basis * signs

    return SymEig(basis=basis, eigvals=np.maximum(eigvals, floor))


def eig_function(eig: SymEig, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply a spectral function: Q diag(fn(eigvals)) Q^T."""
    return (eig.basis * fn(eig.eigvals)) @ eig.basis.T


def _check_bases(Q_A: np.ndarray, Q_S: np.ndarray, V: np.ndarray) -> None:
    if V.ndim < 2 or V.shape[-2] != Q_A.shape[0] or V.shape[-1] != Q_S.shape[0]:
        raise ShapeError(
            f"cannot project matrix of shape {V.shape} with bases {Q_A.shape} and {Q_S.shape}"
        )


def project_to_eigenbasis(Q_A: np.ndarray, Q_S: np.ndarray, V: np.ndarray) -> np.ndarray:
    """
    Express V in the Kronecker eigenbasis: Q_A^T V Q_S.

    This is unvec((Q_S kron Q_A)^T vec(V)). Stacked inputs of shape
    (..., n, p) are projected slice by slice.
    """
    V = np.asarray(V, dtype=float)
    _check_bases(Q_A, Q_S, V)
    return Q_A.T @ V @ Q_S


def project_from_eigenbasis(Q_A: np.ndarray, Q_S: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Inverse of :func:`project_to_eigenbasis`: Q_A V Q_S^T."""
    V = np.asarray(V, dtype=float)
    _check_bases(Q_A, Q_S, V)
    return Q_A @ V @ Q_S.T
