"""Dense symmetric linear algebra and subspace geometry.

Symmetric matrices are plain ``numpy`` arrays; every function that takes
one symmetrizes it first as ``(S + S.T) / 2``.  Bases are wrapped in
:class:`Basis`, which enforces orthonormal columns and a deterministic
sign convention so that repeated runs print identical output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, RankDeficient, SingularMatrix

DEFAULT_REL_TOL = 1e-10
ORTHONORMAL_TOL = 1e-10
SIGN_TOL = 1e-8


def symmetrize(S) -> np.ndarray:
    """Return ``(S + S.T) / 2`` as a float array, checking shape and finiteness."""
    S = np.asarray(S, dtype=float)
    if S.ndim == 0:
        S = S.reshape(1, 1)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InvalidInput("matrix has non-finite entries")
    return (S + S.T) / 2.0


def apply_sign_convention(M: np.ndarray) -> np.ndarray:
    """Flip columns so the first entry with ``|v| > 1e-8`` is positive."""
    M = np.array(M, dtype=float, copy=True)
    for k in range(M.shape[1]):
        col = M[:, k]
        big = np.flatnonzero(np.abs(col) > SIGN_TOL)
        if big.size and col[big[0]] < 0:
            M[:, k] = -col
    return M


@dataclass(frozen=True)
class Basis:
    """Column-orthonormal ``p x q`` matrix representing a subspace of R^p.

    The sign convention is applied on construction; it changes no span.
    """

    columns: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.columns, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if B.ndim != 2 or B.shape[1] == 0 or B.shape[1] > B.shape[0]:
            raise InvalidInput(f"basis must be p x q with 1 <= q <= p, got {B.shape}")
        if not np.all(np.isfinite(B)):
            raise InvalidInput("basis has non-finite entries")
        gram = B.T @ B
        err = np.max(np.abs(gram - np.eye(B.shape[1])))
        if err >= ORTHONORMAL_TOL:
            raise InvalidInput(f"basis columns are not orthonormal (max error {err:.3g})")
        B = apply_sign_convention(B)
        B.setflags(write=False)
        object.__setattr__(self, "columns", B)

    @property
    def ambient_dim(self) -> int:
        return self.columns.shape[0]

    @property
    def rank(self) -> int:
        return self.columns.shape[1]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.columns, dtype=dtype)


@dataclass(frozen=True)
class EigenResult:
    values: np.ndarray
    vectors: Basis


def sym_eig(S) -> EigenResult:
    """Eigendecomposition of a symmetric matrix, eigenvalues in descending order.

    Ties keep the relative order produced by ``numpy.linalg.eigh``.
    """
    S = symmetrize(S)
    values, vectors = np.linalg.eigh(S)
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = vectors[:, order]
    return EigenResult(values=values, vectors=Basis(vectors))


def inv_sqrt(S, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """Symmetric inverse square root ``V diag(lam^-1/2) V^T``.

    Eigenvalues below ``rel_tol * lam_max`` are treated as zero, giving the
    pseudo-inverse square root on the range of ``S``.
    """
    return _spectral_power(S, -0.5, rel_tol)


def pinv_sym(S, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """Spectral pseudo-inverse of a symmetric PSD matrix, same cutoff as :func:`inv_sqrt`."""
    return _spectral_power(S, -1.0, rel_tol)


def _spectral_power(S, power: float, rel_tol: float) -> np.ndarray:
    S = symmetrize(S)
    values, vectors = np.linalg.eigh(S)
    lam_max = values.max()
    if lam_max <= 0:
        raise SingularMatrix("matrix has no positive eigenvalue")
    keep = values >= rel_tol * lam_max
    scaled = np.zeros_like(values)
    scaled[keep] = values[keep] ** power
    out = (vectors * scaled) @ vectors.T
    return (out + out.T) / 2.0


def is_nonsingular(S, rel_tol: float = DEFAULT_REL_TOL) -> bool:
    values = np.linalg.eigvalsh(symmetrize(S))
    lam_max = np.abs(values).max()
    return lam_max > 0 and np.abs(values).min() >= rel_tol * lam_max


def projection(B) -> np.ndarray:
    """Orthogonal projection ``B B^T`` onto the span of a basis."""
    B = _as_basis(B).columns
    P = B @ B.T
    return (P + P.T) / 2.0


def subspace_distance(S1, S2) -> float:
    """Squared Frobenius distance ``||P1 - P2||_F^2`` between two spans."""
    B1, B2 = _as_basis(S1), _as_basis(S2)
    if B1.ambient_dim != B2.ambient_dim:
        raise InvalidInput(
            f"ambient dimensions differ: {B1.ambient_dim} vs {B2.ambient_dim}"
        )
    D = projection(B1) - projection(B2)
    return float(np.sum(D * D))


def orthonormalize(M) -> Basis:
    """Orthonormal basis for the column span of ``M`` (Gram-Schmidt order).

    Raises :class:`RankDeficient` when the smallest singular value is below
    ``1e-10`` times the largest.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape(-1, 1)
    if M.ndim != 2 or M.shape[1] == 0:
        raise InvalidInput(f"expected a p x k matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInput("matrix has non-finite entries")
    if M.shape[1] > M.shape[0]:
        raise RankDeficient(f"{M.shape[1]} columns cannot be independent in R^{M.shape[0]}")
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficient("columns are numerically linearly dependent")
    Q, R = np.linalg.qr(M)
    # Householder QR matches Gram-Schmidt up to column signs; make diag(R) > 0.
    Q = Q * np.sign(np.diag(R))
    # One re-orthogonalization pass keeps ||Q^T Q - I|| well under 1e-10.
    Q2, R2 = np.linalg.qr(Q)
    Q = Q2 * np.sign(np.diag(R2))
    return Basis(Q)


def _as_basis(B) -> Basis:
    if isinstance(B, Basis):
        return B
    return Basis(np.asarray(B, dtype=float))
