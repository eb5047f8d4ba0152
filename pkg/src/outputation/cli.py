"""Command-line front end: analyze, simulate, screen.

``analyze`` runs the outputation estimator on a long CSV and emits a
per-coefficient report (JSON or CSV) plus a full-data GEE baseline row.
``simulate`` runs a named Monte Carlo preset or a spec file and writes
its report as both JSON and CSV.  ``screen`` applies the backward
pairwise-correlation predictor screen.

Exit codes: 0 success (negative moment variances only warn), 2 for
schema/validation problems, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .data import (
    ClusteredDataset,
    load_long_csv,
    screen_predictors,
    validate_min_cluster_size,
)
from .engine import OutputationPlan, run_outputations
from .exceptions import (
    CannotAssessError,
    EmptyDataError,
    EnumerationLimitError,
    InsufficientOutputationsError,
    ParseError,
    SchemaError,
    SingularDesignError,
    SizeViolationError,
)
from .gee import EXCHANGEABLE, INDEPENDENCE, MANCL_DEROUEN, fit_gee
from .inference import (
    NEG_POLICY_FALLBACK,
    NEG_POLICY_UNDEFINED,
    mo_inference,
    required_outputations,
    wald_inference,
)
from .simulate import (
    SimulationReport,
    SimulationSpec,
    run_power,
    run_type1,
    variance_trajectory,
)

_POWER_PAIRS = ((1.0, math.sqrt(0.1)), (math.sqrt(0.8), math.sqrt(0.5)),
                (math.sqrt(0.5), math.sqrt(0.8)), (math.sqrt(0.1), 1.0))


def _clean(x):
    """NaN-free scalar for JSON/CSV serialization."""
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def _fmt(x) -> str:
    """Table-3 style cell: scientific notation, 3 significant digits."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "--"
    return f"{float(x):.2E}"


# ---------------------------------------------------------------------------
# analyze


def _baseline_row(data: ClusteredDataset, corr: str, bias: str, which: str,
                  level: float):
    fit = fit_gee(data, corr=corr, bias_correction=bias)
    var = fit.sigma_bc if (which == "bias_corrected" and fit.sigma_bc is not None) else fit.sigma
    wald = wald_inference(fit.beta, var, level=level)
    coefs = []
    for j, name in enumerate(data.columns):
        coefs.append({
            "name": name,
            "estimate": float(fit.beta[j]),
            "var": float(fit.sigma[j, j]),
            "var_bc": _clean(fit.sigma_bc[j, j]) if fit.sigma_bc is not None else None,
            "z": _clean(wald.z[j]),
            "p": _clean(wald.p[j]),
            "ci": [_clean(wald.ci_low[j]), _clean(wald.ci_high[j])],
        })
    return {
        "converged": fit.converged,
        "iterations": fit.iterations,
        "alpha_hat": _clean(fit.alpha_hat) if fit.alpha_hat is not None else None,
        "phi_hat": float(fit.phi_hat),
        "coefficients": coefs,
    }


def cmd_analyze(args) -> int:
    covariates = [c.strip() for c in args.covariates.split(",") if c.strip()]
    data = load_long_csv(args.input, outcome_col=args.outcome,
                         cluster_col=args.cluster, covariate_cols=covariates,
                         add_intercept=args.add_intercept)
    policy = "drop" if args.drop_small_clusters else "reject"
    data = validate_min_cluster_size(data, args.b, policy=policy)

    corr = args.corr
    bias = MANCL_DEROUEN if args.bias_correction == "mancl-derouen" else "none"
    method_base = args.method.replace("-bc", "")
    which = "bias_corrected" if args.method.endswith("-bc") else "plain"
    if which == "bias_corrected" and bias == "none":
        raise ValueError(f"--method {args.method} requires "
                         "--bias-correction mancl-derouen")

    plan = OutputationPlan(B=args.b, M=args.outputations, master_seed=args.seed)
    acc = run_outputations(data, plan, corr=corr, bias_correction=bias,
                           workers=args.workers)
    inf = mo_inference(acc, args.b, data.sizes, method=method_base,
                       level=args.level, neg_policy=args.neg_var, which=which)

    warnings_out = []
    try:
        m_star = required_outputations(acc, args.b, data.sizes,
                                       method=method_base, which=which)
    except (CannotAssessError, InsufficientOutputationsError) as exc:
        m_star = None
        warnings_out.append(f"required-outputations estimate unavailable: {exc}")

    neg_names = [data.columns[j] for j in np.flatnonzero(inf.moment_negative)]
    if neg_names:
        warnings_out.append(
            f"negative moment-based variance for: {', '.join(neg_names)}")
    if acc.n_excluded:
        warnings_out.append(f"{acc.n_excluded} outputations excluded "
                            "(singular design after retry)")

    coefficients = []
    for j, name in enumerate(data.columns):
        coefficients.append({
            "name": name,
            "estimate": float(inf.beta_bar[j]),
            "var_moment": float(inf.var_moment[j, j]),
            "moment_negative": bool(inf.moment_negative[j]),
            "var_stabilized": float(inf.var_stabilized[j, j]),
            "var_moment_bc": (_clean(inf.var_moment_bc[j, j])
                              if inf.var_moment_bc is not None else None),
            "var_stabilized_bc": (_clean(inf.var_stabilized_bc[j, j])
                                  if inf.var_stabilized_bc is not None else None),
            "z": _clean(inf.z[j]),
            "p": _clean(inf.p[j]),
            "ci": [_clean(inf.ci_low[j]), _clean(inf.ci_high[j])],
        })

    sizes = data.sizes
    report = {
        "meta": {
            "command": "analyze",
            "input": str(args.input),
            "outcome": args.outcome,
            "cluster": args.cluster,
            "covariates": list(data.columns),
            "n": data.n,
            "n_obs": data.n_obs,
            "p": data.p,
            "m_min": int(sizes.min()),
            "m_max": int(sizes.max()),
            "m_mean": float(sizes.mean()),
            "B": args.b,
            "M": args.outputations,
            "corr": corr,
            "bias_correction": args.bias_correction,
            "seed": args.seed,
            "workers": args.workers,
            "method": args.method,
            "neg_var_policy": args.neg_var,
            "level": args.level,
            "version": __version__,
        },
        "coefficients": coefficients,
        "diagnostics": {
            "absorbed": acc.count,
            "failed_fits": acc.n_failed,
            "excluded_fits": acc.n_excluded,
            "shrink_factor": inf.shrink_factor,
            "required_outputations": m_star,
            "negative_moment_coefficients": neg_names,
            "fallback_coefficients": [data.columns[j] for j in inf.fallback_coords],
            "gee_baseline": _baseline_row(data, corr, bias, which, args.level),
            "warnings": warnings_out,
        },
    }

    _write_analyze_report(report, args.output, args.format)
    _print_analyze_table(report)
    for note in warnings_out:
        print(f"warning: {note}", file=sys.stderr)
    return 0


_ANALYZE_CSV_FIELDS = (
    "method", "name", "estimate", "var_moment", "moment_negative",
    "var_stabilized", "var_moment_bc", "var_stabilized_bc",
    "var_sandwich", "var_sandwich_bc", "z", "p", "ci_low", "ci_high")


def _analyze_csv_rows(report: dict):
    label = f"mo-{report['meta']['B']}"
    rows = []
    for c in report["coefficients"]:
        rows.append({
            "method": label, "name": c["name"], "estimate": c["estimate"],
            "var_moment": c["var_moment"],
            "moment_negative": c["moment_negative"],
            "var_stabilized": c["var_stabilized"],
            "var_moment_bc": c["var_moment_bc"],
            "var_stabilized_bc": c["var_stabilized_bc"],
            "var_sandwich": None, "var_sandwich_bc": None,
            "z": c["z"], "p": c["p"],
            "ci_low": c["ci"][0], "ci_high": c["ci"][1],
        })
    for c in report["diagnostics"]["gee_baseline"]["coefficients"]:
        rows.append({
            "method": "gee", "name": c["name"], "estimate": c["estimate"],
            "var_moment": None, "moment_negative": None,
            "var_stabilized": None, "var_moment_bc": None,
            "var_stabilized_bc": None,
            "var_sandwich": c["var"], "var_sandwich_bc": c["var_bc"],
            "z": c["z"], "p": c["p"],
            "ci_low": c["ci"][0], "ci_high": c["ci"][1],
        })
    return rows


def _write_analyze_report(report: dict, output: str, fmt: str) -> None:
    if fmt == "json":
        with open(output, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return
    import csv

    with open(output, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_ANALYZE_CSV_FIELDS)
        writer.writeheader()
        for row in _analyze_csv_rows(report):
            writer.writerow({k: ("" if v is None else
                                 repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def _print_analyze_table(report: dict) -> None:
    meta = report["meta"]
    print(f"n={meta['n']} clusters, N={meta['n_obs']} observations, "
          f"B={meta['B']}, M={meta['M']}, corr={meta['corr']}")
    header = f"{'coefficient':<16}{'estimate':>12}{'var(moment)':>14}" \
             f"{'var(stab)':>12}{'z':>10}{'p':>10}"
    print(header)
    for c in report["coefficients"]:
        flag = "*" if c["moment_negative"] else " "
        print(f"{c['name']:<16}{_fmt(c['estimate']):>12}"
              f"{_fmt(c['var_moment']):>13}{flag}"
              f"{_fmt(c['var_stabilized']):>12}"
              f"{_fmt(c['z']):>10}{_fmt(c['p']):>10}")
    base = report["diagnostics"]["gee_baseline"]
    for c in base["coefficients"]:
        print(f"{c['name'] + ' (gee)':<16}{_fmt(c['estimate']):>12}"
              f"{_fmt(c['var']):>13} {'':>12}"
              f"{_fmt(c['z']):>10}{_fmt(c['p']):>10}")
    if any(c["moment_negative"] for c in report["coefficients"]):
        print("* negative moment-based variance (flagged, not clipped)")


# ---------------------------------------------------------------------------
# simulate


def _preset_spec(args) -> tuple:
    """(kind, SimulationSpec or kwargs) for a named preset."""
    name = args.preset
    sims = args.sims
    M = args.outputations
    seed = args.seed
    b_list = tuple(int(b) for b in args.b_list.split(",")) if args.b_list else None
    if name == "type1-large":
        return "type1-large", SimulationSpec(
            n=args.n or 200, m=10, B=b_list or (1, 2), M=M or 300,
            n_sims=sims or 500, corr=INDEPENDENCE,
            methods=("stabilized", "moment"), master_seed=seed)
    if name == "type1-small":
        return "type1", SimulationSpec(
            n=args.n or 10, m=10, B=b_list or (2,), M=M or 300,
            n_sims=sims or 500, corr=INDEPENDENCE, bias_correction=True,
            methods=("stabilized", "stabilized_bc", "moment_bc"),
            master_seed=seed)
    if name == "power-curve":
        n = args.n or 200
        m = 10
        total = float(np.mean([s * s + t * t for s, t in _POWER_PAIRS]))
        beta1 = args.effect_scale * math.sqrt(total / (n * m))
        return "power", SimulationSpec(
            n=n, m=m, beta1=beta1, B=b_list or (1, 5), M=M or 300,
            n_sims=sims or 500, corr=EXCHANGEABLE,
            methods=("stabilized",), master_seed=seed)
    if name == "variance-trajectory":
        return "variance-trajectory", {
            "n": args.n or 200, "B": (b_list or (2,))[0], "M": M or 250,
            "repeats": args.repeats, "master_seed": seed}
    raise ValueError(f"unknown preset {name!r}")


def cmd_simulate(args) -> int:
    if args.spec_file:
        with open(args.spec_file, encoding="utf-8") as fh:
            payload = json.load(fh)
        kind = payload.pop("kind", "type1")
        pairs = payload.pop("sigma_tau_pairs", None)
        spec = SimulationSpec(**payload)
        if kind == "power":
            report = run_power(spec, pairs or _POWER_PAIRS, workers=args.workers)
        else:
            report = run_type1(spec, workers=args.workers)
        reports = [(args.output or kind, report)]
    else:
        kind, spec = _preset_spec(args)
        stem = args.output or args.preset
        if kind == "type1-large":
            rows, vrows = [], []
            merged_meta = None
            for m in (10, 30):
                sub = dataclasses.replace(spec, m=m)
                rep = run_type1(sub, workers=args.workers)
                rows += [{"m": m, **r} for r in rep.rows]
                vrows += [{"m": m, **r} for r in rep.variance_rows]
                merged_meta = rep.meta
            merged_meta = dict(merged_meta, m=[10, 30])
            reports = [(stem, SimulationReport(kind="type1", meta=merged_meta,
                                               rows=tuple(rows),
                                               variance_rows=tuple(vrows)))]
        elif kind == "power":
            reports = [(stem, run_power(spec, _POWER_PAIRS, workers=args.workers))]
        elif kind == "variance-trajectory":
            reports = [(stem, variance_trajectory(workers=args.workers, **spec))]
        else:
            reports = [(stem, run_type1(spec, workers=args.workers))]

    for stem, report in reports:
        report.write_json(f"{stem}.json")
        report.write_csv(f"{stem}.csv")
        if report.variance_rows:
            report.write_csv(f"{stem}_variance.csv", rows=report.variance_rows)
        print(f"wrote {stem}.json and {stem}.csv ({len(report.rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# screen


def cmd_screen(args) -> int:
    covariates = [c.strip() for c in args.covariates.split(",") if c.strip()]
    data = load_long_csv(args.input, outcome_col=args.outcome,
                         cluster_col=args.cluster, covariate_cols=covariates,
                         add_intercept=args.add_intercept)
    report = screen_predictors(data, threshold=args.threshold)
    payload = {
        "meta": {"command": "screen", "input": str(args.input),
                 "threshold": args.threshold, "version": __version__},
        "retained": list(report.retained),
        "dropped": [{"name": name, "max_abs_correlation": _clean(r)}
                    for name, r in report.dropped],
        "warnings": list(report.warnings),
    }
    if args.format == "json":
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        import csv

        with open(args.output, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["status", "name", "max_abs_correlation"])
            for name in report.retained:
                writer.writerow(["retained", name, ""])
            for name, r in report.dropped:
                writer.writerow(["dropped", name,
                                 "" if math.isnan(r) else repr(float(r))])
    print(f"retained {len(report.retained)} of "
          f"{len(report.retained) + len(report.dropped)} predictors")
    for name, r in report.dropped:
        label = "zero variance" if math.isnan(r) else f"max |r| = {r:.3f}"
        print(f"dropped {name} ({label})")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="outputation",
        description="Within-cluster resampling inference for clustered data")
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="run the outputation estimator on a CSV")
    pa.add_argument("--input", required=True)
    pa.add_argument("--outcome", required=True)
    pa.add_argument("--cluster", required=True)
    pa.add_argument("--covariates", required=True,
                    help="comma-separated covariate column names")
    pa.add_argument("--add-intercept", action="store_true")
    pa.add_argument("--b", type=int, default=1,
                    help="observations sampled per cluster")
    pa.add_argument("--outputations", type=int, default=1000, metavar="M")
    pa.add_argument("--corr", choices=[INDEPENDENCE, EXCHANGEABLE],
                    default=INDEPENDENCE)
    pa.add_argument("--bias-correction", choices=["none", "mancl-derouen"],
                    default="none")
    pa.add_argument("--method",
                    choices=["stabilized", "moment", "stabilized-bc", "moment-bc"],
                    default="stabilized", help="variance behind z/p/CI")
    pa.add_argument("--neg-var",
                    choices=[NEG_POLICY_UNDEFINED, NEG_POLICY_FALLBACK],
                    default=NEG_POLICY_UNDEFINED)
    pa.add_argument("--level", type=float, default=0.95)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    pa.add_argument("--drop-small-clusters", action="store_true")
    pa.add_argument("--format", choices=["json", "csv"], default="json")
    pa.add_argument("--output", required=True)
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", help="run a Monte Carlo preset or spec file")
    ps.add_argument("preset", nargs="?",
                    help="type1-large | type1-small | power-curve | variance-trajectory")
    ps.add_argument("--spec-file", help="JSON file of SimulationSpec fields")
    ps.add_argument("--n", type=int, default=None)
    ps.add_argument("--sims", type=int, default=None)
    ps.add_argument("--outputations", type=int, default=None, metavar="M")
    ps.add_argument("--b-list", default=None, help="comma-separated B values")
    ps.add_argument("--effect-scale", type=float, default=0.6,
                    help="slope as a multiple of the B=1 standard error")
    ps.add_argument("--repeats", type=int, default=10,
                    help="repeats per m for variance-trajectory")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    ps.add_argument("--output", default=None, help="output file stem")
    ps.set_defaults(func=cmd_simulate)

    pc = sub.add_parser("screen", help="backward correlation screening")
    pc.add_argument("--input", required=True)
    pc.add_argument("--outcome", required=True)
    pc.add_argument("--cluster", required=True)
    pc.add_argument("--covariates", required=True)
    pc.add_argument("--add-intercept", action="store_true")
    pc.add_argument("--threshold", type=float, default=0.5)
    pc.add_argument("--format", choices=["json", "csv"], default="json")
    pc.add_argument("--output", required=True)
    pc.set_defaults(func=cmd_screen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate" and not (args.preset or args.spec_file):
        print("error: simulate needs a preset name or --spec-file", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (SchemaError, ParseError, EmptyDataError, SizeViolationError,
            EnumerationLimitError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SingularDesignError, CannotAssessError,
            InsufficientOutputationsError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
