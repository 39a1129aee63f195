"""Dimension-reduction estimators: SIR, pHd, OLS and contour regression.

Every estimator works on a plain predictor matrix, which may be the true
predictor, the raw surrogate or the adjusted surrogate.  Covariances use
divisor ``n`` throughout so the pairwise identities of contour regression
hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import (
    DegenerateDirection,
    DegenerateSlicing,
    InvalidInput,
    NoPairsWithinCut,
    SingularMatrix,
)
from .spectral import DEFAULT_REL_TOL, Basis, inv_sqrt, is_nonsingular, orthonormalize, symmetrize
from .surrogate import CovEstimates, PrimarySample, correction_matrix, moment_cov, surrogate_sigma_u

Method = Literal["sir", "phd", "cr", "ols"]
METHODS = ("sir", "phd", "cr", "ols")

# Above this many observations the pair-fraction cut is found by bisection
# instead of materializing all n(n-1)/2 response increments.
_EXACT_QUANTILE_MAX_N = 3000


@dataclass(frozen=True)
class SdrConfig:
    method: Method = "cr"
    target_dim: int = 2
    n_slices: int = 8
    cut: float | None = 0.5
    pair_fraction: float | None = None
    phd_variant: Literal["response_based", "residual_based"] = "response_based"

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInput(f"unknown method {self.method!r}")
        if self.target_dim < 1:
            raise InvalidInput("target_dim must be positive")
        if self.n_slices < 2:
            raise InvalidInput("n_slices must be at least 2")
        if self.phd_variant not in ("response_based", "residual_based"):
            raise InvalidInput(f"unknown pHd variant {self.phd_variant!r}")
        if self.method == "cr":
            if (self.cut is None) == (self.pair_fraction is None):
                raise InvalidInput("contour regression needs exactly one of cut / pair_fraction")
            if self.cut is not None and not self.cut > 0:
                raise InvalidInput("cut must be positive")
            if self.pair_fraction is not None and not 0 < self.pair_fraction < 1:
                raise InvalidInput("pair_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class FitResult:
    basis: Basis
    eigenvalues: np.ndarray
    method: str
    metadata: dict = field(default_factory=dict)


def _check_data(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidInput(f"x {x.shape} and y {y.shape} are incompatible")
    if x.shape[0] < 2:
        raise InvalidInput("need at least 2 observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInput("data has non-finite entries")
    return x, y


def _check_q(q: int, p: int) -> None:
    if q > p:
        raise InvalidInput(f"target_dim {q} exceeds predictor dimension {p}")


def _whitener(sigma: np.ndarray) -> np.ndarray:
    if not is_nonsingular(sigma, DEFAULT_REL_TOL):
        raise SingularMatrix("predictor covariance is singular")
    return inv_sqrt(sigma)


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Z, Sigma^-1/2)`` with ``Z_i = Sigma^-1/2 (X_i - X_bar)``."""
    xc = x - x.mean(axis=0)
    root = _whitener(moment_cov(x))
    return xc @ root, root


def _directions(root: np.ndarray, vectors: np.ndarray) -> Basis:
    return orthonormalize(root @ vectors)


def _row_hash(x: np.ndarray) -> np.ndarray:
    """Deterministic 64-bit hash of each row's bytes (splitmix64 fold)."""
    bits = np.ascontiguousarray(x + 0.0).view(np.uint64)  # + 0.0 maps -0.0 to 0.0
    h = np.full(x.shape[0], 0x9E3779B97F4A7C15, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in range(x.shape[1]):
            z = h ^ bits[:, k]
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            h = z ^ (z >> np.uint64(31))
    return h


def slice_indices(x: np.ndarray, y: np.ndarray, n_slices: int) -> list[np.ndarray]:
    """Equal-count slices of the rows sorted by ``y``.

    Ties in ``y`` are broken by a hash of the predictor row: the order is
    canonical (independent of input row order) yet unrelated to the
    predictor geometry, so tied responses do not induce spurious slices.
    """
    n = y.shape[0]
    if n < 2 * n_slices:
        raise DegenerateSlicing(f"{n} observations cannot fill {n_slices} slices of size >= 2")
    order = np.lexsort((_row_hash(x), y))
    slices = np.array_split(order, n_slices)
    if any(s.size == 0 for s in slices):
        raise DegenerateSlicing("empty slice")
    return slices


def sir(x, y, cfg: SdrConfig) -> FitResult:
    """Sliced inverse regression."""
    x, y = _check_data(x, y)
    n, p = x.shape
    _check_q(cfg.target_dim, p)
    slices = slice_indices(x, y, cfg.n_slices)
    z, root = _standardize(x)
    M = np.zeros((p, p))
    for s in slices:
        mean = z[s].mean(axis=0)
        M += (s.size / n) * np.outer(mean, mean)
    M = symmetrize(M)
    values, vectors = np.linalg.eigh(M)
    order = np.argsort(-values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    basis = _directions(root, vectors[:, : cfg.target_dim])
    return FitResult(
        basis=basis,
        eigenvalues=values,
        method="sir",
        metadata={"n": n, "n_slices": cfg.n_slices, "slice_sizes": [int(s.size) for s in slices]},
    )


def phd(x, y, cfg: SdrConfig) -> FitResult:
    """Principal Hessian directions, eigenvectors ordered by ``|lambda|``.

    The response-based kernel is ``E_n[(y - y_bar) Z Z^T]``; the residual-based
    variant replaces ``y - y_bar`` by the residual of the OLS fit on ``Z``.
    """
    x, y = _check_data(x, y)
    n, p = x.shape
    _check_q(cfg.target_dim, p)
    z, root = _standardize(x)
    weight = y - y.mean()
    if cfg.phd_variant == "residual_based":
        coef = np.linalg.lstsq(z, weight, rcond=None)[0]
        weight = weight - z @ coef
    M = symmetrize((z * weight[:, None]).T @ z / n)
    values, vectors = np.linalg.eigh(M)
    order = np.argsort(-np.abs(values), kind="stable")
    values, vectors = values[order], vectors[:, order]
    basis = _directions(root, vectors[:, : cfg.target_dim])
    return FitResult(
        basis=basis,
        eigenvalues=values,
        method="phd",
        metadata={"n": n, "variant": cfg.phd_variant},
    )


def ols_direction(x, y, cfg: SdrConfig | None = None) -> FitResult:
    """Single direction ``Sigma^-1 cov(X, y)``.

    ``metadata['r_squared']`` measures how much of ``y`` the linear fit
    explains; values near zero flag a direction that is mostly noise.
    """
    x, y = _check_data(x, y)
    n, p = x.shape
    z, root = _standardize(x)
    yc = y - y.mean()
    gamma = z.T @ yc / n
    direction = root @ gamma
    norm = float(np.linalg.norm(direction))
    if norm < 1e-12:
        raise DegenerateDirection("covariance between predictors and response vanishes")
    var_y = float(yc @ yc / n)
    r2 = float(gamma @ gamma / var_y) if var_y > 0 else 0.0
    values = np.zeros(p)
    values[0] = float(gamma @ gamma)
    return FitResult(
        basis=orthonormalize(direction),
        eigenvalues=values,
        method="ols",
        metadata={"n": n, "direction_norm": norm, "r_squared": r2},
    )


def _pairs_within(ys: np.ndarray, c: float) -> np.ndarray:
    """For ``ys`` sorted ascending: last index ``r_i`` with ``ys[r_i] <= ys[i] + c``."""
    return np.searchsorted(ys, ys + c, side="right") - 1


def _count_pairs(ys: np.ndarray, c: float) -> int:
    r = _pairs_within(ys, c)
    return int(np.sum(r - np.arange(ys.shape[0])))


def resolve_cut(y, pair_fraction: float) -> float:
    """Empirical quantile of ``|y_j - y_i|`` over all pairs.

    Returns the ``ceil(fraction * N)``-th smallest increment.  Large samples
    use a bisection on the pair count, which agrees up to float spacing.
    """
    ys = np.sort(np.asarray(y, dtype=float).ravel())
    n = ys.shape[0]
    total = n * (n - 1) // 2
    if total == 0:
        raise NoPairsWithinCut("fewer than two observations")
    k = max(1, math.ceil(pair_fraction * total))
    if n <= _EXACT_QUANTILE_MAX_N:
        diffs = np.concatenate([ys[i + 1 :] - ys[i] for i in range(n - 1)])
        return float(np.partition(diffs, k - 1)[k - 1])
    lo, hi = 0.0, float(ys[-1] - ys[0])
    if _count_pairs(ys, lo) >= k:
        return lo
    for _ in range(200):
        mid = (lo + hi) / 2.0
        if mid <= lo or mid >= hi:
            break
        if _count_pairs(ys, mid) >= k:
            hi = mid
        else:
            lo = mid
    return hi


def contour_matrix(x, y, cut: float | None = None, pair_fraction: float | None = None):
    """Pairwise-difference scatter over pairs with ``|y_j - y_i| <= cut``.

    Returns ``(H, pairs_included)`` where ``H`` is divided by ``n(n-1)/2``
    regardless of how many pairs pass.  After sorting by ``y`` the included
    partners of each row form a contiguous window, so ``H`` is assembled
    from prefix sums in ``O(n log n + n p^2)`` as the Laplacian form
    ``X^T (D - A) X`` of the pair graph.  A pair ``i < j`` (sorted order) is
    included when ``y_j <= y_i + cut``.
    """
    x, y = _check_data(x, y)
    n, p = x.shape
    if (cut is None) == (pair_fraction is None):
        raise InvalidInput("give exactly one of cut / pair_fraction")
    if pair_fraction is not None:
        cut = resolve_cut(y, pair_fraction)
    if not cut >= 0:
        raise InvalidInput("cut must be non-negative")
    order = np.argsort(y, kind="stable")
    ys = y[order]
    # any shift cancels in the pair differences; a coordinate-wise data value
    # keeps small exact inputs exact while guarding against large offsets
    xs = x[order] - np.partition(x, (n - 1) // 2, axis=0)[(n - 1) // 2]
    r = _pairs_within(ys, cut)
    idx = np.arange(n)
    k = r - idx
    pairs = int(k.sum())
    if pairs == 0:
        raise NoPairsWithinCut(f"no pair of responses within {cut}")
    # deg_j = (#partners after j) + (#partners before j)
    cover = np.zeros(n + 1, dtype=np.int64)
    np.add.at(cover, idx + 1, 1)
    np.add.at(cover, r + 1, -1)
    deg = k + np.cumsum(cover)[:n]
    prefix = np.vstack([np.zeros((1, p)), np.cumsum(xs, axis=0)])
    partner_sums = prefix[r + 1] - prefix[idx + 1]
    cross = xs.T @ partner_sums
    H = (xs * deg[:, None]).T @ xs - cross - cross.T
    H = symmetrize(H / (n * (n - 1) / 2.0))
    return H, pairs


def _smallest_directions(H: np.ndarray, sigma: np.ndarray, q: int):
    root = _whitener(sigma)
    K = symmetrize(root @ H @ root)
    values, vectors = np.linalg.eigh(K)
    order = np.argsort(-values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    # q smallest, smallest first
    chosen = vectors[:, ::-1][:, :q]
    return _directions(root, chosen), values


def cr(x, y, cfg: SdrConfig) -> FitResult:
    """Contour regression: directions from the ``q`` smallest eigenvalues."""
    x, y = _check_data(x, y)
    n, p = x.shape
    _check_q(cfg.target_dim, p)
    cut = cfg.cut if cfg.pair_fraction is None else resolve_cut(y, cfg.pair_fraction)
    H, pairs = contour_matrix(x, y, cut=cut)
    basis, values = _smallest_directions(H, moment_cov(x), cfg.target_dim)
    return FitResult(
        basis=basis,
        eigenvalues=values,
        method="cr",
        metadata={"n": n, "cut": float(cut), "pairs_included": pairs, "pairs_total": n * (n - 1) // 2},
    )


def cr_factorized(
    primary: PrimarySample,
    est: CovEstimates,
    cfg: SdrConfig,
    use_primary_sigma_w: bool = False,
) -> FitResult:
    """Contour regression on the adjusted surrogate without forming it.

    ``H_U = A H_W A^T`` with ``H_W`` computed on the raw surrogate, and
    ``Sigma_U = A Sigma_W1 A^T``, ``A`` being the correction matrix.
    """
    n, r = primary.w.shape
    _check_q(cfg.target_dim, r)
    cut = cfg.cut if cfg.pair_fraction is None else resolve_cut(primary.y, cfg.pair_fraction)
    H_w, pairs = contour_matrix(primary.w, primary.y, cut=cut)
    sigma_w1 = moment_cov(primary.w)
    if est.scheme == "split_halves" and est.sigma_w_primary is None:
        est = est.with_primary(primary.w)
    A = correction_matrix(est, use_primary_sigma_w=use_primary_sigma_w)
    H_u = A @ H_w @ A.T
    sigma_u = surrogate_sigma_u(est, sigma_w1, use_primary_sigma_w=use_primary_sigma_w)
    basis, values = _smallest_directions(H_u, sigma_u, cfg.target_dim)
    return FitResult(
        basis=basis,
        eigenvalues=values,
        method="cr",
        metadata={
            "n": n,
            "cut": float(cut),
            "pairs_included": pairs,
            "pairs_total": n * (n - 1) // 2,
            "factorized": True,
        },
    )


def fit(x, y, cfg: SdrConfig) -> FitResult:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "sir":
        return sir(x, y, cfg)
    if cfg.method == "phd":
        return phd(x, y, cfg)
    if cfg.method == "cr":
        return cr(x, y, cfg)
    return ols_direction(x, y, cfg)
