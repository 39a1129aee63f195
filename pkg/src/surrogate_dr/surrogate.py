"""Measurement-error covariance estimation and surrogate adjustment.

The observed predictor is ``W = gamma + Gamma^T X + delta``.  An auxiliary
sample identifies the covariance structure, and the surrogate is replaced by
its linear regression on ``X``::

    U_hat = A (W - center),  A = Sigma_XW Sigma_W^-1            (validation)
                             A = I - Sigma_delta Sigma_W^-1     (replication, split halves)

All moment estimators are centered and use divisor ``m`` (plain averages).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .errors import InsufficientData, InvalidEstimates, InvalidInput, SingularMatrix
from .spectral import DEFAULT_REL_TOL, is_nonsingular, pinv_sym, symmetrize

Scheme = Literal["validation", "replication", "split_halves"]
SCHEMES = ("validation", "replication", "split_halves")


def _matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be a 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} has non-finite entries")
    return a


def moment_cov(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Centered cross-moment ``E_m[(a - a_bar)(b - b_bar)^T]`` with divisor m."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    ac = a - a.mean(axis=0)
    if b is None:
        out = ac.T @ ac / a.shape[0]
        return (out + out.T) / 2.0
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    bc = b - b.mean(axis=0)
    return ac.T @ bc / a.shape[0]


@dataclass(frozen=True)
class PrimarySample:
    y: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        w = _matrix(self.w, "w")
        y = np.asarray(self.y, dtype=float).ravel()
        if not np.all(np.isfinite(y)):
            raise InvalidInput("y has non-finite entries")
        if y.shape[0] != w.shape[0]:
            raise InvalidInput(f"y has {y.shape[0]} rows but w has {w.shape[0]}")
        if y.shape[0] < 2:
            raise InsufficientData("primary sample needs at least 2 observations")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def r(self) -> int:
        return self.w.shape[1]


@dataclass(frozen=True)
class ValidationSample:
    """Auxiliary rows where both the true predictor and its surrogate are observed."""

    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        x, w = _matrix(self.x, "x"), _matrix(self.w, "w")
        if x.shape[0] != w.shape[0]:
            raise InvalidInput("x and w must have the same number of rows")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)

    @property
    def m(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class ReplicationSample:
    """Two independent error-contaminated measurements of each auxiliary X_i."""

    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        w1, w2 = _matrix(self.w1, "w1"), _matrix(self.w2, "w2")
        if w1.shape != w2.shape:
            raise InvalidInput(f"w1 {w1.shape} and w2 {w2.shape} differ in shape")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def m(self) -> int:
        return self.w1.shape[0]


@dataclass(frozen=True)
class SplitHalvesSample:
    """Per-coordinate replication from halved questionnaires.

    ``error_prone`` holds ``(j, a_j, b_j)`` triples, ``j`` being the 0-based
    predictor coordinate.  Columns of ``error_free`` fill the remaining
    coordinates in increasing order.  ``response_halves`` optionally carries
    the two half-measurements of the response.
    """

    error_prone: Sequence[tuple[int, np.ndarray, np.ndarray]]
    error_free: np.ndarray
    response_halves: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        prone = []
        for j, a, b in self.error_prone:
            a = np.asarray(a, dtype=float).ravel()
            b = np.asarray(b, dtype=float).ravel()
            if a.shape != b.shape:
                raise InvalidInput(f"halves of coordinate {j} differ in length")
            prone.append((int(j), a, b))
        free = _matrix(self.error_free, "error_free") if np.size(self.error_free) else None
        lengths = {a.shape[0] for _, a, _ in prone}
        if free is not None:
            lengths.add(free.shape[0])
        if len(lengths) != 1:
            raise InvalidInput("all coordinates must have the same number of rows")
        m = lengths.pop()
        if free is None:
            free = np.zeros((m, 0))
        p = len(prone) + free.shape[1]
        idx = [j for j, _, _ in prone]
        if len(set(idx)) != len(idx) or any(j < 0 or j >= p for j in idx):
            raise InvalidInput(f"error-prone indices {idx} invalid for p = {p}")
        if self.response_halves is not None:
            va, vb = (np.asarray(v, dtype=float).ravel() for v in self.response_halves)
            if va.shape[0] != m or vb.shape[0] != m:
                raise InvalidInput("response halves must have one entry per row")
            object.__setattr__(self, "response_halves", (va, vb))
        object.__setattr__(self, "error_prone", tuple(sorted(prone, key=lambda t: t[0])))
        object.__setattr__(self, "error_free", free)

    @property
    def m(self) -> int:
        return self.error_free.shape[0]

    @property
    def p(self) -> int:
        return len(self.error_prone) + self.error_free.shape[1]

    @property
    def error_free_indices(self) -> list[int]:
        prone = {j for j, _, _ in self.error_prone}
        return [j for j in range(self.p) if j not in prone]

    def surrogate(self) -> np.ndarray:
        """The ``m x p`` surrogate matrix: half-averages and error-free columns."""
        W = np.empty((self.m, self.p))
        for j, a, b in self.error_prone:
            W[:, j] = (a + b) / 2.0
        W[:, self.error_free_indices] = self.error_free
        return W

    def response(self) -> np.ndarray:
        if self.response_halves is None:
            raise InvalidInput("sample carries no response halves")
        va, vb = self.response_halves
        return (va + vb) / 2.0


@dataclass(frozen=True)
class CovEstimates:
    scheme: Scheme
    sigma_xw: np.ndarray
    sigma_w_aux: np.ndarray
    sigma_w_primary: np.ndarray | None = None
    sigma_delta: np.ndarray | None = None
    m: int | None = field(default=None, compare=False)

    def with_primary(self, w_primary) -> "CovEstimates":
        """Attach the primary-sample ``Sigma_W`` estimated from surrogate rows."""
        return replace(self, sigma_w_primary=moment_cov(_matrix(w_primary, "w")))


@dataclass(frozen=True)
class Adjustment:
    matrix_a: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        A = _matrix(self.matrix_a, "matrix_a")
        c = np.asarray(self.center, dtype=float).ravel()
        if c.shape[0] != A.shape[1]:
            raise InvalidInput(f"center has length {c.shape[0]}, expected {A.shape[1]}")
        if not np.all(np.isfinite(c)):
            raise InvalidInput("center has non-finite entries")
        object.__setattr__(self, "matrix_a", A)
        object.__setattr__(self, "center", c)


@dataclass(frozen=True)
class AdjustedSample:
    u: np.ndarray
    y: np.ndarray


def estimate_from_validation(v: ValidationSample) -> CovEstimates:
    p, r = v.x.shape[1], v.w.shape[1]
    if v.m < p + 1 or v.m < r + 1:
        raise InsufficientData(f"validation sample of size {v.m} too small for p={p}, r={r}")
    return CovEstimates(
        scheme="validation",
        sigma_xw=moment_cov(v.x, v.w),
        sigma_w_aux=moment_cov(v.w),
        m=v.m,
    )


def estimate_from_replication(r: ReplicationSample) -> CovEstimates:
    """Moment estimates under ``W_ij = gamma + X_i + delta_ij`` (Gamma = I).

    ``Sigma_delta = var(W1 - W2) / 2`` and
    ``Sigma_W = var(W1 + W2) / 4 + var(W1 - W2) / 4``.
    """
    p = r.w1.shape[1]
    if r.m < p + 1:
        raise InsufficientData(f"replication sample of size {r.m} too small for p={p}")
    s_diff = moment_cov(r.w1 - r.w2)
    s_sum = moment_cov(r.w1 + r.w2)
    sigma_delta = s_diff / 2.0
    sigma_w = s_sum / 4.0 + s_diff / 4.0
    return CovEstimates(
        scheme="replication",
        sigma_xw=s_sum / 4.0 - s_diff / 4.0,
        sigma_w_aux=sigma_w,
        sigma_delta=sigma_delta,
        m=r.m,
    )


def estimate_from_split_halves(s: SplitHalvesSample) -> CovEstimates:
    """Diagonal ``Sigma_delta`` with ``var(a_j - b_j) / 4`` per error-prone coordinate.

    ``sigma_w_aux`` is the covariance of the half-averages.  The correction
    uses ``sigma_w_primary``, which the caller attaches with
    :meth:`CovEstimates.with_primary`.
    """
    if s.m < 2:
        raise InsufficientData("split-halves sample needs at least 2 rows")
    diag = np.zeros(s.p)
    for j, a, b in s.error_prone:
        diag[j] = moment_cov(a - b)[0, 0] / 4.0
    sigma_delta = np.diag(diag)
    sigma_w = moment_cov(s.surrogate())
    return CovEstimates(
        scheme="split_halves",
        sigma_xw=sigma_w - sigma_delta,
        sigma_w_aux=sigma_w,
        sigma_delta=sigma_delta,
        m=s.m,
    )


def population_estimates(sigma_x, gamma, sigma_delta) -> CovEstimates:
    """Exact population covariances for ``W = Gamma^T X + delta``.

    ``Sigma_XW = Sigma_X Gamma`` and ``Sigma_W = Gamma^T Sigma_X Gamma + Sigma_delta``.
    """
    sigma_x = symmetrize(sigma_x)
    gamma = _matrix(gamma, "gamma")
    sigma_delta = symmetrize(sigma_delta)
    sigma_w = symmetrize(gamma.T @ sigma_x @ gamma + sigma_delta)
    return CovEstimates(
        scheme="validation",
        sigma_xw=sigma_x @ gamma,
        sigma_w_aux=sigma_w,
        sigma_w_primary=sigma_w,
        sigma_delta=sigma_delta,
    )


def correction_matrix(
    est: CovEstimates,
    use_primary_sigma_w: bool = False,
    rel_tol: float = DEFAULT_REL_TOL,
    strict: bool = False,
) -> np.ndarray:
    """The linear map from centered surrogate to adjusted predictor.

    For split halves the primary ``Sigma_W`` is always used; for replication
    only when ``use_primary_sigma_w`` is set.  With ``strict`` a singular
    ``Sigma_W`` raises instead of falling back to the pseudo-inverse.
    """
    if est.scheme not in SCHEMES:
        raise InvalidEstimates(f"unknown scheme {est.scheme!r}")
    if est.scheme == "split_halves" or use_primary_sigma_w:
        sigma_w = est.sigma_w_primary
        if sigma_w is None:
            raise InvalidEstimates(f"scheme {est.scheme} needs sigma_w_primary")
    else:
        sigma_w = est.sigma_w_aux
        if sigma_w is None:
            raise InvalidEstimates("sigma_w_aux is missing")
    if strict and not is_nonsingular(sigma_w, rel_tol):
        raise SingularMatrix("Sigma_W is singular")
    sigma_w_inv = pinv_sym(sigma_w, rel_tol)
    if est.scheme == "validation":
        if est.sigma_xw is None:
            raise InvalidEstimates("validation scheme needs sigma_xw")
        return np.asarray(est.sigma_xw) @ sigma_w_inv
    if est.sigma_delta is None:
        raise InvalidEstimates(f"scheme {est.scheme} needs sigma_delta")
    p = sigma_w_inv.shape[0]
    if np.shape(est.sigma_delta) != (p, p):
        raise InvalidEstimates("replication schemes require p = r")
    return np.eye(p) - np.asarray(est.sigma_delta) @ sigma_w_inv


def make_adjustment(
    est: CovEstimates,
    w_center,
    use_primary_sigma_w: bool = False,
    rel_tol: float = DEFAULT_REL_TOL,
) -> Adjustment:
    A = correction_matrix(est, use_primary_sigma_w=use_primary_sigma_w, rel_tol=rel_tol)
    return Adjustment(matrix_a=A, center=np.asarray(w_center, dtype=float))


def adjust(sample: PrimarySample, a: Adjustment) -> AdjustedSample:
    """``U_hat_i = A (W_i - center)``; the response passes through unchanged."""
    if a.matrix_a.shape[1] != sample.r:
        raise InvalidInput(
            f"adjustment expects {a.matrix_a.shape[1]} surrogate columns, sample has {sample.r}"
        )
    u = (sample.w - a.center) @ a.matrix_a.T
    return AdjustedSample(u=u, y=sample.y.copy())


def surrogate_sigma_u(est: CovEstimates, sigma_w_primary, use_primary_sigma_w: bool = False) -> np.ndarray:
    """Factorized variance of the adjusted predictor, ``A Sigma_W1 A^T``.

    ``A`` is built from the auxiliary ``Sigma_W2`` (see :func:`correction_matrix`);
    ``Sigma_W1`` is the primary-sample estimate passed in.
    """
    sigma_w1 = symmetrize(sigma_w_primary)
    if est.scheme == "split_halves" and est.sigma_w_primary is None:
        est = replace(est, sigma_w_primary=sigma_w1)
    A = correction_matrix(est, use_primary_sigma_w=use_primary_sigma_w, strict=True)
    out = A @ sigma_w1 @ A.T
    return (out + out.T) / 2.0
