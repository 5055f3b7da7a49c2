"""
Complex Hermitian linear algebra on small (M x M) matrices.

Cholesky goes through LAPACK ?potrf so that the failing pivot can be
reported; eigen decompositions use LAPACK eigh. The *_batched variants
vectorize over a leading axis (frequency bins) with the same semantics.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg as sla
from scipy.linalg import lapack

from rtfgraph.errors import ConvergenceError, NotPositiveDefiniteError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HermitianMatrix:
    """Square complex matrix symmetrized to A == A^H on construction."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ShapeError(f"Hermitian matrix must be square, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Hermitian matrix has non-finite entries")
        data = 0.5 * (data + data.conj().T)
        # exact: the symmetrized upper triangle is mirrored into the lower one
        upper = np.triu(data, 1)
        data = upper + upper.conj().T + np.diag(np.real(np.diag(data)))
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.shape[0]


def hermitize(a: np.ndarray) -> np.ndarray:
    """Batched (A + A^H) / 2 over the last two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2).conj())


def _as_array(a) -> np.ndarray:
    if isinstance(a, HermitianMatrix):
        return a.data
    return HermitianMatrix(a).data


def fix_phase(v: np.ndarray) -> np.ndarray:
    """Rotate vectors (last axis) so their largest-magnitude entry is real-positive.

    Ties go to the lowest index.
    """
    v = np.asarray(v, dtype=np.complex128)
    idx = np.argmax(np.abs(v), axis=-1)
    pivot = np.take_along_axis(v, idx[..., None], axis=-1)
    mag = np.abs(pivot)
    rot = np.where(mag > 0, np.conj(pivot) / np.where(mag > 0, mag, 1.0), 1.0)
    return v * rot


def cholesky(b) -> np.ndarray:
    """Lower Cholesky factor L with L @ L^H == B.

    Args:
        b: HermitianMatrix or array

    Returns:
        np.ndarray: Lower-triangular factor

    Raises:
        NotPositiveDefiniteError: With the 0-based index of the failing pivot
    """
    a = _as_array(b)
    factor, info = lapack.zpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"zpotrf rejected argument {-info}")
    return factor


def hermitian_evd(a) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvector columns.

    Raises:
        ConvergenceError: If LAPACK eigh fails to converge
    """
    a = _as_array(a)
    try:
        eigvals, eigvecs = sla.eigh(a)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"Hermitian EVD did not converge: {e}") from e
    return eigvals[::-1].copy(), eigvecs[:, ::-1].copy()


def gevd_top(a, b) -> Tuple[float, np.ndarray]:
    """Largest generalized eigenpair of the pencil (A, B) by Cholesky whitening.

    With B = L L^H, the top eigenvector u of C = L^-1 A L^-H gives
    phi = L^-H u, normalized to unit norm and phase-fixed.

    Args:
        a: Hermitian matrix A
        b: Positive definite Hermitian matrix B

    Returns:
        tuple: (mu, phi)

    Raises:
        NotPositiveDefiniteError: If B is not positive definite
    """
    a = _as_array(a)
    factor = cholesky(b)
    left = sla.solve_triangular(factor, a, lower=True)
    whitened = sla.solve_triangular(factor, left.conj().T, lower=True).conj().T
    eigvals, eigvecs = hermitian_evd(HermitianMatrix(whitened))
    phi = sla.solve_triangular(factor.conj().T, eigvecs[:, 0], lower=False)
    phi = fix_phase(phi / np.linalg.norm(phi))
    return float(eigvals[0]), phi


def solve_hermitian(a, b) -> np.ndarray:
    """Solve A x = b for positive definite A through its Cholesky factor."""
    factor = cholesky(a)
    return sla.cho_solve((factor, True), np.asarray(b, dtype=np.complex128))


def _locate_failure(b: np.ndarray):
    for index, mat in enumerate(b):
        try:
            cholesky(mat)
        except NotPositiveDefiniteError as e:
            raise NotPositiveDefiniteError(
                e.pivot, f"Matrix {index} is not positive definite (failing pivot index {e.pivot})"
            ) from None
    raise NotPositiveDefiniteError(-1, "Batched Cholesky failed on a matrix LAPACK accepts one by one")


def cholesky_batched(b: np.ndarray) -> np.ndarray:
    """Lower Cholesky factors of a stack (..., M, M)."""
    b = hermitize(np.asarray(b, dtype=np.complex128))
    try:
        return np.linalg.cholesky(b)
    except np.linalg.LinAlgError:
        _locate_failure(b.reshape(-1, b.shape[-2], b.shape[-1]))


def solve_hermitian_batched(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A[k] x[k] = b[k] for a stack of positive definite matrices.

    b may be (..., M) or (..., M, n).
    """
    factor = cholesky_batched(a)
    return cho_solve_batched(factor, b)


def cho_solve_batched(factor: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve with precomputed lower Cholesky factors (..., M, M)."""
    b = np.asarray(b, dtype=np.complex128)
    vector = b.ndim == factor.ndim - 1
    rhs = b[..., None] if vector else b
    y = np.linalg.solve(factor, rhs)
    x = np.linalg.solve(np.swapaxes(factor, -1, -2).conj(), y)
    return x[..., 0] if vector else x


def gevd_top_batched(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Top generalized eigenpairs for stacks of pencils (..., M, M).

    Returns:
        tuple: (mu with shape (...), phi with shape (..., M))
    """
    a = hermitize(np.asarray(a, dtype=np.complex128))
    factor = cholesky_batched(b)
    left = np.linalg.solve(factor, a)
    whitened = hermitize(np.swapaxes(np.linalg.solve(factor, np.swapaxes(left, -1, -2).conj()), -1, -2).conj())
    try:
        eigvals, eigvecs = np.linalg.eigh(whitened)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"Batched Hermitian EVD did not converge: {e}") from e
    top = eigvecs[..., :, -1]
    phi = np.linalg.solve(np.swapaxes(factor, -1, -2).conj(), top[..., None])[..., 0]
    phi = phi / np.linalg.norm(phi, axis=-1, keepdims=True)
    return eigvals[..., -1], fix_phase(phi)
