"""Data generators and Monte Carlo experiments.

Random streams are derived per replicate from ``(master_seed, replicate
index, stream tag)`` through :class:`numpy.random.SeedSequence`, so every
replicate is reproducible on its own and results do not depend on the
order or parallel scheduling of replicates.
"""

from __future__ import annotations

import logging
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache, partial
from typing import Literal, Sequence

import numpy as np
from scipy import integrate, stats

from .errors import InvalidDesign, SdrError
from .estimators import SdrConfig, fit
from .spectral import orthonormalize, subspace_distance
from .surrogate import (
    Adjustment,
    PrimarySample,
    ReplicationSample,
    SplitHalvesSample,
    ValidationSample,
    adjust,
    estimate_from_replication,
    make_adjustment,
    population_estimates,
)

log = logging.getLogger(__name__)

THREADS_ENV = "SURROGATE_DR_THREADS"
TABLE1_SIGMAS = (0.2, 0.4, 0.6)
BETA1 = (1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
BETA2 = (1.0, 0.0, 0.0, 0.0, 1.0, 3.0)


def example_gamma(p: int = 6) -> np.ndarray:
    """Unit diagonal, 0.5 off the diagonal."""
    return np.full((p, p), 0.5) + 0.5 * np.eye(p)


@dataclass(frozen=True)
class SimulationSpec:
    p: int = 6
    n: int = 400
    m: int = 100
    sigma_eps: float = 0.2
    sigma_delta: float = 0.2
    gamma_matrix: tuple | None = None  # None means identity
    intercept: tuple | None = None  # None means zero
    beta1: tuple = BETA1
    beta2: tuple = BETA2
    predictor_law: Literal["gaussian", "radial_uniform"] = "gaussian"
    master_seed: int = 20240501
    n_slices: int = 8
    cut: float = 0.5
    target_dim: int = 2
    # residual-based pHd matches the reference pHd results
    phd_variant: Literal["response_based", "residual_based"] = "residual_based"

    def __post_init__(self):
        if self.p < 1 or self.n < 2 or self.m < 2:
            raise InvalidDesign("p must be >= 1 and n, m >= 2")
        if self.sigma_eps < 0 or self.sigma_delta < 0:
            raise InvalidDesign("noise scales must be non-negative")
        if len(self.beta1) != self.p or len(self.beta2) != self.p:
            raise InvalidDesign("beta1 and beta2 must have length p")
        if np.linalg.matrix_rank(np.column_stack([self.beta1, self.beta2])) < 2:
            raise InvalidDesign("beta1 and beta2 must be linearly independent")
        if self.predictor_law not in ("gaussian", "radial_uniform"):
            raise InvalidDesign(f"unknown predictor law {self.predictor_law!r}")
        if self.gamma_matrix is not None:
            g = np.asarray(self.gamma_matrix, dtype=float)
            if g.shape != (self.p, self.p):
                raise InvalidDesign("gamma_matrix must be p x p")
            object.__setattr__(self, "gamma_matrix", tuple(map(tuple, g.tolist())))
        if self.intercept is not None:
            if len(self.intercept) != self.p:
                raise InvalidDesign("intercept must have length p")
            object.__setattr__(self, "intercept", tuple(float(v) for v in self.intercept))
        object.__setattr__(self, "beta1", tuple(float(v) for v in self.beta1))
        object.__setattr__(self, "beta2", tuple(float(v) for v in self.beta2))

    @property
    def gamma(self) -> np.ndarray:
        if self.gamma_matrix is None:
            return np.eye(self.p)
        return np.asarray(self.gamma_matrix, dtype=float)

    @property
    def gamma_is_identity(self) -> bool:
        return self.gamma_matrix is None or np.array_equal(self.gamma, np.eye(self.p))

    @property
    def intercept_vector(self) -> np.ndarray:
        if self.intercept is None:
            return np.zeros(self.p)
        return np.asarray(self.intercept, dtype=float)

    @property
    def beta(self) -> np.ndarray:
        return np.column_stack([self.beta1, self.beta2])

    def true_basis(self):
        return orthonormalize(self.beta)

    def sigma_x(self) -> np.ndarray:
        """Population covariance of the predictor under ``predictor_law``."""
        if self.predictor_law == "gaussian":
            return np.eye(self.p)
        return radial_uniform_variance(self.p) * np.eye(self.p)

    def population(self):
        return population_estimates(self.sigma_x(), self.gamma, self.sigma_delta**2 * np.eye(self.p))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidDesign(f"unknown spec fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("beta1", "beta2", "intercept"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("gamma_matrix") is not None:
            d["gamma_matrix"] = tuple(tuple(row) for row in d["gamma_matrix"])
        return cls(**d)


def rng_for(master_seed: int, replicate_index: int, tag: str) -> np.random.Generator:
    """Independent generator for one (seed, replicate, stream) triple."""
    ss = np.random.SeedSequence(
        entropy=int(master_seed) & (2**64 - 1),
        spawn_key=(int(replicate_index), zlib.crc32(tag.encode())),
    )
    return np.random.default_rng(ss)


@lru_cache(maxsize=None)
def radial_uniform_variance(p: int) -> float:
    """Per-coordinate variance of ``3 Z Phi(|Z|) / |Z|``, i.e. ``9 E[Phi(R)^2] / p``."""
    val, _ = integrate.quad(lambda r: stats.norm.cdf(r) ** 2 * stats.chi.pdf(r, p), 0, np.inf)
    return 9.0 * val / p


def _draw_x(spec: SimulationSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((n, spec.p))
    if spec.predictor_law == "gaussian":
        return z
    return _radialize(z)


def _radialize(z: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    norm = np.where(norm == 0, 1.0, norm)
    return 3.0 * z * stats.norm.cdf(norm) / norm


def model16_response(x: np.ndarray, spec: SimulationSpec, eps: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    b1 = np.asarray(spec.beta1)
    b2 = np.asarray(spec.beta2)
    y = 0.4 * (x @ b1) ** 2 + 3.0 * np.sin((x @ b2) / 4.0)
    if eps is not None:
        y = y + spec.sigma_eps * eps
    return y


def gen_model16(spec: SimulationSpec, replicate_index: int):
    """Primary sample ``(X, Y, W)`` from the quadratic-plus-sine model.

    ``Y = 0.4 (b1'X)^2 + 3 sin(b2'X / 4) + sigma_eps * eps`` and
    ``W = intercept + Gamma^T X + delta``.
    """
    x = _draw_x(spec, spec.n, rng_for(spec.master_seed, replicate_index, "x"))
    eps = rng_for(spec.master_seed, replicate_index, "eps").standard_normal(spec.n)
    y = model16_response(x, spec, eps)
    w = x @ spec.gamma
    if spec.sigma_delta > 0:
        delta = rng_for(spec.master_seed, replicate_index, "delta").standard_normal((spec.n, spec.p))
        w = w + spec.sigma_delta * delta
    if spec.intercept is not None:
        w = w + spec.intercept_vector
    return x, y, w


def gen_model16_delta(spec: SimulationSpec, replicate_index: int) -> np.ndarray:
    """The measurement errors used by :func:`gen_model16` for the same replicate."""
    if spec.sigma_delta == 0:
        return np.zeros((spec.n, spec.p))
    rng = rng_for(spec.master_seed, replicate_index, "delta")
    return spec.sigma_delta * rng.standard_normal((spec.n, spec.p))


def gen_nonnormal(spec: SimulationSpec, replicate_index: int) -> np.ndarray:
    """``X = 3 Z Phi(|Z|) / |Z|``: uniform along each ray, norm at most 3."""
    z = rng_for(spec.master_seed, replicate_index, "x").standard_normal((spec.n, spec.p))
    return _radialize(z)


def gen_validation_aux(spec: SimulationSpec, replicate_index: int) -> ValidationSample:
    x = _draw_x(spec, spec.m, rng_for(spec.master_seed, replicate_index, "aux_x"))
    delta = rng_for(spec.master_seed, replicate_index, "aux_delta").standard_normal((spec.m, spec.p))
    w = spec.intercept_vector + x @ spec.gamma + spec.sigma_delta * delta
    return ValidationSample(x=x, w=w)


def gen_replication_aux(spec: SimulationSpec, replicate_index: int) -> ReplicationSample:
    """``W_ij = intercept + X_i + delta_ij`` for ``j = 1, 2``; requires Gamma = I."""
    if not spec.gamma_is_identity:
        raise InvalidDesign("the replication scheme assumes Gamma = I")
    x = _draw_x(spec, spec.m, rng_for(spec.master_seed, replicate_index, "aux_x"))
    d1 = rng_for(spec.master_seed, replicate_index, "aux_delta1").standard_normal((spec.m, spec.p))
    d2 = rng_for(spec.master_seed, replicate_index, "aux_delta2").standard_normal((spec.m, spec.p))
    base = spec.intercept_vector + x
    return ReplicationSample(w1=base + spec.sigma_delta * d1, w2=base + spec.sigma_delta * d2)


def sdr_config(spec: SimulationSpec, method: str) -> SdrConfig:
    return SdrConfig(
        method=method,
        target_dim=spec.target_dim,
        n_slices=spec.n_slices,
        cut=spec.cut,
        phd_variant=spec.phd_variant,
    )


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn, items: Sequence, workers: int) -> list:
    """Ordered map; results come back in input order whatever the scheduling."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- noise-grid comparison


@dataclass(frozen=True)
class CellRecord:
    sigma_eps: float
    sigma_delta: float
    method: str
    mean_rho: float
    sd_rho: float
    se_rho: float
    reps: int
    failures: int


@dataclass
class ExperimentReport:
    records: list[CellRecord]
    provenance: dict = field(default_factory=dict)

    def cell(self, sigma_eps: float, sigma_delta: float, method: str) -> CellRecord:
        for rec in self.records:
            if (
                math.isclose(rec.sigma_eps, sigma_eps)
                and math.isclose(rec.sigma_delta, sigma_delta)
                and rec.method == method
            ):
                return rec
        raise KeyError((sigma_eps, sigma_delta, method))


def _summarize(values: list[float]) -> tuple[float, float, float]:
    if not values:
        return math.nan, math.nan, math.nan
    arr = np.asarray(values)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, sd, sd / math.sqrt(arr.size)


def table1_replicate(spec: SimulationSpec, methods: tuple[str, ...], replicate_index: int) -> dict:
    """One replicate of the surrogate pipeline; maps method to rho or error name."""
    _, y, w = gen_model16(spec, replicate_index)
    est = estimate_from_replication(gen_replication_aux(spec, replicate_index))
    adj = make_adjustment(est, w.mean(axis=0))
    u = adjust(PrimarySample(y=y, w=w), adj).u
    truth = spec.true_basis()
    out = {}
    for method in methods:
        try:
            res = fit(u, y, sdr_config(spec, method))
        except SdrError as exc:
            out[method] = exc.name
            continue
        rho = subspace_distance(res.basis, truth)
        if not 0.0 <= rho <= 2 * spec.target_dim + 1e-9:
            raise AssertionError(f"distance {rho} outside [0, {2 * spec.target_dim}]")
        out[method] = rho
    return out


def run_table1(
    spec: SimulationSpec,
    methods: Sequence[str] = ("sir", "phd", "cr"),
    reps: int = 100,
    sigma_eps_grid: Sequence[float] = TABLE1_SIGMAS,
    sigma_delta_grid: Sequence[float] = TABLE1_SIGMAS,
    workers: int | None = None,
) -> ExperimentReport:
    """Monte Carlo comparison of surrogate estimators over the noise grid.

    Each replicate draws a primary sample and a replication auxiliary sample,
    adjusts the surrogate, fits every method and records the distance to the
    true span.  Replicates whose estimator fails are counted, not averaged.
    """
    for method in methods:
        if method not in ("sir", "phd", "cr"):
            raise InvalidDesign(f"method {method!r} not supported in the comparison")
    workers = default_workers() if workers is None else workers
    methods = tuple(methods)
    start = time.perf_counter()
    records = []
    for s_eps in sigma_eps_grid:
        for s_delta in sigma_delta_grid:
            cell_spec = replace(spec, sigma_eps=float(s_eps), sigma_delta=float(s_delta))
            results = _map(partial(table1_replicate, cell_spec, methods), list(range(reps)), workers)
            for method in methods:
                vals = [r[method] for r in results if not isinstance(r[method], str)]
                mean, sd, se = _summarize(vals)
                records.append(
                    CellRecord(
                        sigma_eps=float(s_eps),
                        sigma_delta=float(s_delta),
                        method=method,
                        mean_rho=mean,
                        sd_rho=sd,
                        se_rho=se,
                        reps=len(vals),
                        failures=reps - len(vals),
                    )
                )
            log.info("cell (%g, %g) done", s_eps, s_delta)
    return ExperimentReport(
        records=records,
        provenance={
            "spec": spec.to_dict(),
            "seed": spec.master_seed,
            "reps": reps,
            "methods": list(methods),
            "wall_time": time.perf_counter() - start,
        },
    )


# ---------------------------------------------------------------- invariance


def population_adjustment(spec: SimulationSpec) -> Adjustment:
    est = spec.population()
    return make_adjustment(est, spec.intercept_vector)


def _invariance_replicate(spec: SimulationSpec, method: str, replicate_index: int):
    x, y, w = gen_model16(spec, replicate_index)
    u = adjust(PrimarySample(y=y, w=w), population_adjustment(spec)).u
    cfg = sdr_config(spec, method)
    truth = spec.true_basis()
    bx = fit(x, y, cfg).basis
    bu = fit(u, y, cfg).basis
    return subspace_distance(bx, bu), subspace_distance(bx, truth), subspace_distance(bu, truth)


def invariance_check(
    spec: SimulationSpec,
    method: str = "cr",
    n_grid: Sequence[int] = (500, 2000, 4000),
    reps: int = 30,
    workers: int | None = None,
) -> list[dict]:
    """Compare spans fitted on the true predictor and on the population-adjusted surrogate.

    Returns one row per ``n`` with mean and SD of the distance between the
    two fits and of each fit to the true span.
    """
    workers = default_workers() if workers is None else workers
    rows = []
    for n in n_grid:
        nspec = replace(spec, n=int(n))
        out = np.asarray(_map(partial(_invariance_replicate, nspec, method), list(range(reps)), workers))
        rows.append(
            {
                "n": int(n),
                "reps": reps,
                "mean_rho_xu": float(out[:, 0].mean()),
                "sd_rho_xu": float(out[:, 0].std(ddof=1)) if reps > 1 else 0.0,
                "mean_rho_x_truth": float(out[:, 1].mean()),
                "mean_rho_u_truth": float(out[:, 2].mean()),
            }
        )
    return rows


# ---------------------------------------------------------------- convergence


def _convergence_replicate(spec: SimulationSpec, method: str, exact: bool, replicate_index: int) -> float:
    _, y, w = gen_model16(spec, replicate_index)
    if exact:
        adj = population_adjustment(spec)
    else:
        est = estimate_from_replication(gen_replication_aux(spec, replicate_index))
        adj = make_adjustment(est, w.mean(axis=0))
    u = adjust(PrimarySample(y=y, w=w), adj).u
    res = fit(u, y, sdr_config(spec, method))
    return math.sqrt(subspace_distance(res.basis, spec.true_basis()))


def _loglog_slope(grid: Sequence[int], errors: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(grid, dtype=float)), np.log(np.asarray(errors)), 1)
    return float(slope)


def convergence_experiment(
    spec: SimulationSpec,
    method: str = "cr",
    n_grid: Sequence[int] | None = (250, 500, 1000, 2000, 4000),
    m_grid: Sequence[int] | None = (250, 500, 1000, 2000, 4000),
    reps: int = 20,
    n_hold: int = 100_000,
    m_hold: int | None = 100_000,
    workers: int | None = None,
) -> dict:
    """Empirical rates of the surrogate estimator in ``n`` and in ``m``.

    The error is ``sqrt(rho)`` to the true span.  ``slope_n`` is the log-log
    slope of its mean over ``n_grid`` with ``m = m_hold``; ``slope_m`` varies
    ``m`` over ``m_grid`` with ``n = n_hold``.  ``m_hold=None`` injects the
    true covariances instead of estimating them.  Either grid may be None to
    skip that half.
    """
    workers = default_workers() if workers is None else workers
    for grid in (n_grid, m_grid):
        if grid is not None and len(grid) < 3:
            raise InvalidDesign("each grid needs at least 3 points")
    out: dict = {"method": method, "reps": reps, "n_hold": n_hold, "m_hold": m_hold}
    if n_grid is not None:
        errs = []
        for n in n_grid:
            s = replace(spec, n=int(n), m=int(m_hold or spec.m))
            fn = partial(_convergence_replicate, s, method, m_hold is None)
            errs.append(float(np.mean(_map(fn, list(range(reps)), workers))))
        out.update(n_grid=list(n_grid), n_errors=errs, slope_n=_loglog_slope(n_grid, errs))
    if m_grid is not None:
        errs = []
        for m in m_grid:
            s = replace(spec, n=int(n_hold), m=int(m))
            fn = partial(_convergence_replicate, s, method, False)
            errs.append(float(np.mean(_map(fn, list(range(reps)), workers))))
        out.update(m_grid=list(m_grid), m_errors=errs, slope_m=_loglog_slope(m_grid, errs))
    return out


# ---------------------------------------------------------------- projection diagnostic


def projection_normality_diag(
    p_grid: Sequence[int] = (5, 20, 80, 320),
    n: int = 100_000,
    seed: int = 20240501,
    law: Literal["gaussian", "radial_uniform"] = "radial_uniform",
    sigma_delta: float = 0.5,
    draws: int = 200,
) -> list[dict]:
    """Per-dimension diagnostics for the large-p approximate invariance.

    ``inner_max`` is the max absolute entry of ``p^-1 M^T M~`` averaged over
    ``draws`` independent pairs, where ``M = (U, X, Sigma_U Sigma_X^-1 X)``
    is ``p x 3`` (Gamma = I, isotropic errors).  ``ks`` is the
    Kolmogorov-Smirnov distance between ``n`` draws of a random unit
    projection of ``X``, standardized empirically, and the standard normal.
    """
    rows = []
    for p in p_grid:
        if p < 2:
            raise InvalidDesign("projection diagnostic needs p >= 2")
        eye = np.eye(p)
        spec = SimulationSpec(
            p=int(p), n=n, sigma_delta=sigma_delta, beta1=eye[0], beta2=eye[1],
            predictor_law=law, master_seed=seed,
        )
        pop = spec.population()
        a = make_adjustment(pop, np.zeros(p)).matrix_a
        sx = spec.sigma_x()
        su = a @ pop.sigma_w_aux @ a.T
        lin = su @ np.linalg.inv(sx)

        def draw(tag: str):
            rng = rng_for(seed, p, tag)
            x = _draw_x(spec, draws, rng)
            delta = sigma_delta * rng.standard_normal((draws, p))
            u = (x + delta) @ a.T
            return np.stack([u, x, x @ lin.T], axis=2)  # draws x p x 3

        m1, m2 = draw("diag_m"), draw("diag_m_tilde")
        inner = np.einsum("dpi,dpj->dij", m1, m2) / p
        inner_max = float(np.abs(inner).reshape(draws, -1).max(axis=1).mean())

        rng = rng_for(seed, p, "diag_proj")
        direction = rng.standard_normal(p)
        direction /= np.linalg.norm(direction)
        proj = _draw_x(spec, n, rng) @ direction
        proj = (proj - proj.mean()) / proj.std()
        ks = float(stats.kstest(proj, "norm").statistic)
        rows.append({"p": int(p), "inner_max": inner_max, "ks": ks, "draws": draws, "n": n, "law": law})
    return rows


# ---------------------------------------------------------------- split halves


def gen_split_halves(
    n: int,
    replicate_index: int,
    master_seed: int = 20240501,
    sigma_x: np.ndarray | None = None,
    eta_var: Sequence[float] = (0.0406, 0.0876, 0.0360),
    direction: Sequence[float] = (0.935, 0.291, 0.126, 0.159),
    response_sd: float = 0.05,
    xi_sd: float = 0.05,
) -> SplitHalvesSample:
    """Synthetic four-predictor data with a split-halves questionnaire design.

    ``X ~ N(0, sigma_x)``; the response is linear in ``direction' X`` plus
    noise, observed as two halves with error ``xi``.  Each of the first three
    predictors is observed as two halves with independent errors of variance
    ``eta_var[j]``; the fourth is error free.  The surrogate average then
    carries measurement error of variance ``eta_var[j] / 2``.
    """
    if sigma_x is None:
        sigma_x = np.array(
            [
                [0.0520, 0.0280, 0.0044, 0.0192],
                [0.0280, 0.1212, -0.0063, 0.0353],
                [0.0044, -0.0063, 0.0901, -0.0066],
                [0.0192, 0.0353, -0.0066, 0.0946],
            ]
        )
    sigma_x = np.asarray(sigma_x, dtype=float)
    p = sigma_x.shape[0]
    rng = rng_for(master_seed, replicate_index, "split_x")
    x = rng.multivariate_normal(np.zeros(p), sigma_x, size=n, method="eigh")
    b = np.asarray(direction, dtype=float)
    y = x @ b + response_sd * rng_for(master_seed, replicate_index, "split_eps").standard_normal(n)
    noise = rng_for(master_seed, replicate_index, "split_eta").standard_normal((len(eta_var), 2, n))
    prone = [
        (j, x[:, j] + math.sqrt(v) * noise[j, 0], x[:, j] + math.sqrt(v) * noise[j, 1])
        for j, v in enumerate(eta_var)
    ]
    xi = xi_sd * rng_for(master_seed, replicate_index, "split_xi").standard_normal((2, n))
    return SplitHalvesSample(
        error_prone=prone,
        error_free=x[:, len(eta_var):],
        response_halves=(y + xi[0], y + xi[1]),
    )
