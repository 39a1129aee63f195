"""Command-line interface.

Exit codes: 0 on success, 1 for usage, configuration or input-format
problems, 2 when a computation fails (singular covariance, empty cut, ...).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, InvalidDesign, ParseError, SchemaError, SdrError
from .estimators import SdrConfig, fit
from .simulation import (
    SimulationSpec,
    TABLE1_SIGMAS,
    convergence_experiment,
    invariance_check,
    projection_normality_diag,
    run_table1,
)
from .spectral import subspace_distance
from .surrogate import (
    PrimarySample,
    adjust,
    estimate_from_replication,
    estimate_from_split_halves,
    estimate_from_validation,
    make_adjustment,
)

log = logging.getLogger("surrogate_dr")

EXIT_OK, EXIT_USAGE, EXIT_COMPUTE = 0, 1, 2
USAGE_ERRORS = (ConfigError, ParseError, SchemaError, InvalidDesign)

REPORT_HEADER = ["sigma_eps", "sigma_delta", "method", "mean_rho", "sd_rho", "se_rho", "reps", "failures"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ commands


def cmd_adjust(
    primary_csv,
    aux_csv,
    scheme: str,
    out_csv,
    use_primary_sigma_w: bool = False,
) -> Path:
    """Estimate the error structure, adjust the surrogate and write ``y,u1..up``.

    For ``split_halves`` the auxiliary file is also the primary sample unless
    ``primary_csv`` is given.  A ``.meta.json`` sidecar records the estimates
    and the correction matrix.
    """
    if scheme == "validation":
        est = estimate_from_validation(io.read_validation(aux_csv))
    elif scheme == "replication":
        est = estimate_from_replication(io.read_replication(aux_csv))
    elif scheme == "split_halves":
        halves = io.read_split_halves(aux_csv)
        est = estimate_from_split_halves(halves)
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")

    if primary_csv is not None:
        primary = io.read_primary(primary_csv)
    elif scheme == "split_halves":
        primary = PrimarySample(y=halves.response(), w=halves.surrogate())
    else:
        raise ConfigError(f"scheme {scheme} needs a primary sample")

    r = est.sigma_w_aux.shape[0]
    if primary.r != r:
        raise SchemaError(f"primary sample has {primary.r} surrogate columns, auxiliary has {r}")
    if scheme == "split_halves" or use_primary_sigma_w:
        est = est.with_primary(primary.w)
    adj = make_adjustment(est, primary.w.mean(axis=0), use_primary_sigma_w=use_primary_sigma_w)
    out = adjust(primary, adj)

    p = out.u.shape[1]
    header = ["y"] + [f"u{j}" for j in range(1, p + 1)]
    io.write_table(out_csv, header, np.column_stack([out.y, out.u]))
    meta = io.jsonable(
        {
            "scheme": est.scheme,
            "n": primary.n,
            "m": est.m,
            "sigma_xw": est.sigma_xw,
            "sigma_w_aux": est.sigma_w_aux,
            "sigma_w_primary": est.sigma_w_primary,
            "sigma_delta": est.sigma_delta,
            "matrix_a": adj.matrix_a,
            "center": adj.center,
            "use_primary_sigma_w": use_primary_sigma_w,
        }
    )
    io.write_json(_sidecar(out_csv, ".meta.json"), meta)
    return Path(out_csv)


def cmd_fit(sample_csv, cfg: SdrConfig, out) -> Path:
    """Fit one estimator and write the basis with ``#`` metadata lines."""
    sample = io.read_primary(sample_csv)
    meta = {"method": cfg.method, "q": cfg.target_dim, "n": sample.n}
    if cfg.method == "sir":
        meta["n_slices"] = cfg.n_slices
    elif cfg.method == "phd":
        meta["phd_variant"] = cfg.phd_variant
    elif cfg.method == "cr":
        if cfg.cut is not None:
            meta["cut"] = float(cfg.cut)
        else:
            meta["pair_fraction"] = float(cfg.pair_fraction)
    try:
        res = fit(sample.w, sample.y, cfg)
    except SdrError as exc:
        meta["error"] = exc.name
        meta["message"] = str(exc)
        io.write_basis(out, None, meta)
        raise
    meta["eigenvalues"] = res.eigenvalues
    if "pairs_included" in res.metadata:
        meta["cut"] = float(res.metadata["cut"])
        meta["pairs_included"] = res.metadata["pairs_included"]
    io.write_basis(out, res.basis, meta)
    return Path(out)


def cmd_simulate(spec_file, out, reps: int | None = None, overrides: dict | None = None, workers=None) -> Path:
    """Run the Monte Carlo comparison and write one CSV row per cell and method."""
    cfg = io.read_config(spec_file) if spec_file is not None else {}
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    reps = int(reps if reps is not None else cfg.pop("reps", 100))
    cfg.pop("reps", None)
    methods = _as_list(cfg.pop("methods", ["sir", "phd", "cr"]), str)
    eps_grid = _as_list(cfg.pop("sigma_eps_grid", TABLE1_SIGMAS), float)
    delta_grid = _as_list(cfg.pop("sigma_delta_grid", TABLE1_SIGMAS), float)
    try:
        spec = SimulationSpec.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation spec: {exc}") from exc
    if reps < 1:
        raise ConfigError("reps must be positive")
    report = run_table1(spec, methods, reps, eps_grid, delta_grid, workers=workers)
    rows = [
        [rec.sigma_eps, rec.sigma_delta, rec.method, rec.mean_rho, rec.sd_rho, rec.se_rho, rec.reps, rec.failures]
        for rec in report.records
    ]
    io.write_table(out, REPORT_HEADER, rows)
    prov = dict(report.provenance)
    prov.update(sigma_eps_grid=eps_grid, sigma_delta_grid=delta_grid)
    io.write_json(_sidecar(out, ".provenance.json"), prov)
    return Path(out)


def cmd_distance(basis_a, basis_b) -> float:
    a, _ = io.read_basis(basis_a)
    b, _ = io.read_basis(basis_b)
    if a.ambient_dim != b.ambient_dim:
        raise SchemaError(f"bases live in R^{a.ambient_dim} and R^{b.ambient_dim}")
    return subspace_distance(a, b)


def cmd_scatter(sample_csv, basis_file, out_csv) -> Path:
    """Long-format plot data ``direction_index,projected_value,y`` (n x q rows)."""
    sample = io.read_primary(sample_csv)
    basis, _ = io.read_basis(basis_file)
    if basis.ambient_dim != sample.r:
        raise SchemaError(f"basis has {basis.ambient_dim} rows, sample has {sample.r} predictors")
    proj = sample.w @ basis.columns
    rows = []
    for k in range(basis.rank):
        for value, yv in zip(proj[:, k], sample.y):
            rows.append([str(k + 1), value, yv])
    io.write_table(out_csv, ["direction_index", "projected_value", "y"], rows)
    return Path(out_csv)


def cmd_diagnose(what: str, out, spec: SimulationSpec, **kw) -> Path:
    if what == "projection":
        rows = projection_normality_diag(
            p_grid=kw["p_grid"], n=kw["n"], seed=spec.master_seed, law=spec.predictor_law,
            sigma_delta=spec.sigma_delta,
        )
        header = ["p", "inner_max", "ks", "draws", "n"]
    elif what == "invariance":
        rows = invariance_check(spec, kw["method"], kw["n_grid"], kw["reps"], workers=kw.get("workers"))
        header = ["n", "reps", "mean_rho_xu", "sd_rho_xu", "mean_rho_x_truth", "mean_rho_u_truth"]
    elif what == "convergence":
        res = convergence_experiment(
            spec, kw["method"], kw["n_grid"], kw["m_grid"], kw["reps"], workers=kw.get("workers")
        )
        rows = [{"axis": "n", "size": s, "mean_sqrt_rho": e, "slope": res["slope_n"]}
                for s, e in zip(res["n_grid"], res["n_errors"])]
        rows += [{"axis": "m", "size": s, "mean_sqrt_rho": e, "slope": res["slope_m"]}
                 for s, e in zip(res["m_grid"], res["m_errors"])]
        header = ["axis", "size", "mean_sqrt_rho", "slope"]
    else:
        raise ConfigError(f"unknown diagnostic {what!r}")
    io.write_table(out, header, [[r[h] for h in header] for r in rows])
    return Path(out)


# ------------------------------------------------------------------ helpers


def _sidecar(path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.name + suffix)


def _as_list(value, cast) -> list:
    if isinstance(value, (list, tuple)):
        return [cast(v) for v in value]
    if isinstance(value, str):
        return [cast(v.strip()) for v in value.split(",") if v.strip()]
    return [cast(value)]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _sdr_config(args) -> SdrConfig:
    cut, frac = args.cut, args.pair_fraction
    if args.method == "cr" and cut is None and frac is None:
        cut = 0.5
    if args.method != "cr":
        cut, frac = 0.5, None
    return SdrConfig(
        method=args.method,
        target_dim=args.q,
        n_slices=args.slices,
        cut=cut,
        pair_fraction=frac,
        phd_variant=args.phd_variant,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surrogate-dr", description="Surrogate dimension reduction under measurement error.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("adjust", help="estimate the error structure and adjust a surrogate sample")
    p.add_argument("--primary", help="primary sample CSV (y,w1..wr)")
    p.add_argument("--aux", required=True, help="auxiliary sample CSV")
    p.add_argument("--scheme", required=True, choices=["validation", "replication", "split_halves"])
    p.add_argument("--use-primary-sigma-w", action="store_true",
                   help="use the primary-sample Sigma_W in the replication correction")
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("fit", help="fit a dimension-reduction estimator")
    p.add_argument("sample", help="sample CSV (y,w1..wr or y,u1..up)")
    p.add_argument("--method", choices=["sir", "phd", "cr", "ols"], default="cr")
    p.add_argument("-q", type=int, default=2, help="target dimension")
    p.add_argument("--slices", type=int, default=8)
    p.add_argument("--cut", type=float)
    p.add_argument("--pair-fraction", type=float)
    p.add_argument("--phd-variant", choices=["response_based", "residual_based"], default="response_based")
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo comparison over the noise grid")
    p.add_argument("--spec", help="key=value or JSON spec file")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--methods")
    p.add_argument("--workers", type=int)
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("distance", help="print the subspace distance between two basis files")
    p.add_argument("basis_a")
    p.add_argument("basis_b")

    p = sub.add_parser("scatter", help="emit plot-ready projections of a sample onto a basis")
    p.add_argument("sample")
    p.add_argument("basis")
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("diagnose", help="invariance, convergence and projection diagnostics")
    p.add_argument("what", choices=["projection", "invariance", "convergence"])
    p.add_argument("--spec", help="key=value or JSON spec file")
    p.add_argument("--seed", type=int)
    p.add_argument("--law", choices=["gaussian", "radial_uniform"])
    p.add_argument("--method", default="cr", choices=["sir", "phd", "cr"])
    p.add_argument("--p-grid", type=_ints, default=[5, 20, 80, 320])
    p.add_argument("--n", type=int, default=100_000, help="sample size for the projection KS check")
    p.add_argument("--n-grid", type=_ints, default=[500, 2000, 4000])
    p.add_argument("--m-grid", type=_ints, default=[250, 500, 1000, 2000, 4000])
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--workers", type=int)
    p.add_argument("-o", "--out", required=True)
    return parser


def _run(args) -> int:
    if args.command == "adjust":
        cmd_adjust(args.primary, args.aux, args.scheme, args.out, args.use_primary_sigma_w)
    elif args.command == "fit":
        cmd_fit(args.sample, _sdr_config(args), args.out)
    elif args.command == "simulate":
        overrides = {"master_seed": args.seed, "methods": args.methods}
        cmd_simulate(args.spec, args.out, reps=args.reps, overrides=overrides, workers=args.workers)
    elif args.command == "distance":
        print(io.fmt(cmd_distance(args.basis_a, args.basis_b)))
    elif args.command == "scatter":
        cmd_scatter(args.sample, args.basis, args.out)
    elif args.command == "diagnose":
        cfg = io.read_config(args.spec) if args.spec else {}
        if args.seed is not None:
            cfg["master_seed"] = args.seed
        if args.law is not None:
            cfg["predictor_law"] = args.law
        try:
            spec = SimulationSpec.from_dict(cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid simulation spec: {exc}") from exc
        cmd_diagnose(
            args.what, args.out, spec, p_grid=args.p_grid, n=args.n, method=args.method,
            n_grid=args.n_grid, m_grid=args.m_grid, reps=args.reps, workers=args.workers,
        )
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    start = time.perf_counter()
    try:
        code = _run(args)
    except USAGE_ERRORS as exc:
        print(f"# error: {type(exc).__name__}", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SdrError as exc:
        print(f"# error: {exc.name}", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
