"""Command-line front end.

Subcommands: ``simulate`` (replicated ground-truth runs), ``table1``
(intensity-estimator bias/efficiency/coverage over a crossed design),
``table2`` (total-flow estimator bias and RRMSE), ``analyze`` (full pipeline
on real counter records), ``gof`` (goodness-of-fit diagnostics). Every
command is deterministic given ``--seed``; outputs embed the seed and full
configuration, plus a schema version. ``BF_THREADS`` caps simulation
parallelism (never affecting results).

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, NumericsError
from .estimate import m_estimate, mle_dsl, singleton_mom, wald_interval
from .flow import a_hat_1, a_hat_bayes, relative_bias, rrmse
from .ingest import (build_sample, clean_records, parse_counter_csv,
                     rate_to_time_domain, to_time_domain, RunSummary)
from .model import ModelParams, SegmentLaw, clump_density, singleton_mass
from .numerics import RandomStream, ks_pvalue, ks_statistic
from .simulate import CellParams, ExperimentDesign, run_design, simulate_run

SCHEMA_VERSION = 1

TABLE1_FIELDS = [
    "sigma", "t", "lambda", "mean_n", "rel_bias_m", "rel_bias_mle",
    "rel_eff_var_mle_over_m", "rel_eff_var_m_over_mle",
    "coverage_lrt", "coverage_se", "coverage_se_g", "n_negative_m",
]
TABLE2_FIELDS = [
    "sigma", "t", "lambda", "rel_bias_a1", "rel_bias_ab", "rrmse_a1", "rrmse_ab",
]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BF_THREADS", "1")))
    except ValueError:
        return 1


def _metadata(command: str, args: argparse.Namespace) -> dict:
    config = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("func", "out") and not k.startswith("_")
    }
    return {"schema_version": SCHEMA_VERSION, "version": __version__,
            "command": command, "config": config}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_table_csv(path: Path, fields: list, rows: list[dict], meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _parse_cells(spec: str | None, mu: float, replicates: int,
                 seed: int) -> tuple[ExperimentDesign, list[CellParams]]:
    """Cells as 'sigma:t:lambda[,...]'; default is the full 3 x 2 x 3 grid."""
    design = ExperimentDesign(mu=mu, replicates=replicates, master_seed=seed)
    if spec is None:
        return design, design.cells()
    cells = []
    for i, chunk in enumerate(spec.split(",")):
        parts = chunk.split(":")
        if len(parts) != 3:
            raise DataError(f"bad cell spec {chunk!r}; expected sigma:t:lambda")
        sigma, t, lam = (float(p) for p in parts)
        cells.append(CellParams(sigma=sigma, horizon=t, lam=lam, index=i))
    return design, cells


def cmd_simulate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = ModelParams(
        lam=args.lam, segments=SegmentLaw(mean=args.mu, sd=args.sigma),
        horizon_t=args.t,
    )
    summaries = []
    for rep in range(args.reps):
        run = simulate_run(params, RandomStream(args.seed, rep))
        run.write_clumps_csv(out / f"run_{rep:04d}.csv")
        summaries.append(run.summary())
    payload = _metadata("simulate", args)
    payload["replicates"] = summaries
    payload["mean_n"] = float(np.mean([s["n_clumps"] for s in summaries]))
    _write_json(out / "summary.json", payload)
    print(f"simulate: {args.reps} replicate(s) -> {out} (mean N = {payload['mean_n']:.1f})")
    return 0


def _estimate_cell(design: ExperimentDesign, cell: CellParams, with_mle: bool,
                   threads: int) -> dict:
    """Per-replicate estimates for one cell, in replicate order."""
    reps = run_design(design, threads=threads, cells=[cell])[cell.key()]
    rows = {
        "n": [], "a_t": [], "lambda_m": [], "se_dsl": [], "se_g": [],
        "lambda_mle": [], "lrt_lo": [], "lrt_hi": [], "a1": [],
    }
    for rep in reps:
        sample = rep.sample
        report = m_estimate(sample)
        lam = report.lambda_hat
        rows["n"].append(sample.n)
        rows["a_t"].append(rep.summary["a_t"])
        rows["lambda_m"].append(lam)
        rows["se_dsl"].append(report.se_dsl if report.se_dsl is not None else math.nan)
        rows["se_g"].append(report.se_g if report.se_g is not None else math.nan)
        rows["a1"].append(a_hat_1(lam, sample.n, design.mu) if lam > 0 else math.nan)
        if with_mle:
            mle = mle_dsl(sample)
            lo, hi = mle.ci_lrt if mle.ci_lrt else (math.nan, math.nan)
            rows["lambda_mle"].append(mle.lambda_hat)
            rows["lrt_lo"].append(lo)
            rows["lrt_hi"].append(hi)
    return rows


def _table1_row(cell: CellParams, rows: dict) -> dict:
    lam = cell.lam
    z = 1.959963984540054  # 97.5% normal quantile: 95% Wald intervals
    lam_m = np.asarray(rows["lambda_m"])
    lam_mle = np.asarray(rows["lambda_mle"])
    se_dsl = np.asarray(rows["se_dsl"])
    se_g = np.asarray(rows["se_g"])
    lo = np.asarray(rows["lrt_lo"])
    hi = np.asarray(rows["lrt_hi"])
    ok = np.isfinite(se_dsl)
    var_m = float(lam_m.var(ddof=1))
    var_mle = float(lam_mle.var(ddof=1))
    return {
        "sigma": cell.sigma, "t": cell.horizon, "lambda": lam,
        "mean_n": float(np.mean(rows["n"])),
        "rel_bias_m": float((lam_m.mean() - lam) / lam),
        "rel_bias_mle": float((lam_mle.mean() - lam) / lam),
        "rel_eff_var_mle_over_m": var_mle / var_m,
        "rel_eff_var_m_over_mle": var_m / var_mle,
        "coverage_lrt": float(np.mean((lo <= lam) & (lam <= hi))),
        "coverage_se": float(np.mean(ok & (np.abs(lam_m - lam) <= z * se_dsl))),
        "coverage_se_g": float(np.mean(ok & (np.abs(lam_m - lam) <= z * se_g))),
        "n_negative_m": int(np.count_nonzero(lam_m <= 0)),
    }


def cmd_table1(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    design, cells = _parse_cells(args.cells, args.mu, args.reps, args.seed)
    meta = _metadata("table1", args)
    table_rows, replicate_payload = [], {}
    for cell in cells:
        rows = _estimate_cell(design, cell, with_mle=True, threads=_threads())
        table_rows.append(_table1_row(cell, rows))
        replicate_payload[f"{cell.sigma}:{cell.horizon}:{cell.lam}"] = rows
    _write_table_csv(out / "table1.csv", TABLE1_FIELDS, table_rows, meta)
    _write_json(out / "table1.json", {**meta, "rows": table_rows})
    _write_json(out / "table1_replicates.json", {**meta, "cells": replicate_payload})
    print(f"table1: {len(cells)} cell(s) x {args.reps} replicates -> {out}")
    return 0


def cmd_table2(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    design, cells = _parse_cells(args.cells, args.mu, args.reps, args.seed)
    meta = _metadata("table2", args)
    table_rows = []
    for cell in cells:
        reps = run_design(design, threads=_threads(), cells=[cell])[cell.key()]
        a1s, abs_, truths = [], [], []
        skipped = 0
        for rep in reps:
            sample = rep.sample
            lam = m_estimate(sample).lambda_hat
            if lam <= 0:
                skipped += 1
                continue
            flow_report = a_hat_bayes(sample, lam, design.mu, clamp_below=True)
            a1s.append(flow_report.a_hat_1)
            abs_.append(flow_report.a_hat_b)
            truths.append(rep.summary["a_t"])
        table_rows.append({
            "sigma": cell.sigma, "t": cell.horizon, "lambda": cell.lam,
            "rel_bias_a1": relative_bias(a1s, truths),
            "rel_bias_ab": relative_bias(abs_, truths),
            "rrmse_a1": rrmse(a1s, truths),
            "rrmse_ab": rrmse(abs_, truths),
        })
        if skipped:
            table_rows[-1]["n_skipped"] = skipped
    _write_table_csv(out / "table2.csv", TABLE2_FIELDS, table_rows, meta)
    _write_json(out / "table2.json", {**meta, "rows": table_rows})
    print(f"table2: {len(cells)} cell(s) x {args.reps} replicates -> {out}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, rejects = parse_counter_csv(args.input, args.schema)
    if not records:
        raise DataError(f"no usable records in {args.input}")
    kept, removal = clean_records(records, d0=args.mu / 1000.0, min_frac=args.min_frac)
    if not kept:
        raise DataError("all records removed by cleaning")
    with open(out / "rejects.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "reason", "raw"])
        for rej in rejects:
            writer.writerow([rej.row, rej.reason, rej.raw])
        for rec, reason in removal.removed:
            writer.writerow(["", reason, f"v={rec.v},cl={rec.cl}"])

    lengths_mm = np.array([rec.cl for rec in kept]) * 1000.0
    vbar = float(np.mean([rec.v for rec in kept]))  # m/s == mm/msec
    if args.domain == "time":
        lengths = to_time_domain(lengths_mm, vbar)
        mu_eff = args.mu / vbar
    else:
        lengths = lengths_mm
        mu_eff = args.mu
    sample = build_sample(lengths, mu_eff, singleton_rtol=args.singleton_tol)

    report = m_estimate(sample)
    lam = report.lambda_hat
    estimates: dict = {"m": report.to_dict()}
    if lam > 0:
        estimates["m"]["ci_wald_dsl"] = list(wald_interval(report, 0.95, "DSL"))
        estimates["m"]["ci_wald_g"] = list(wald_interval(report, 0.95, "G"))
    if sample.m1:
        estimates["singleton_mom"] = singleton_mom(sample, mu_eff).to_dict()
    flow_payload = None
    if lam > 0:
        flow_report = a_hat_bayes(sample, lam, mu_eff, clamp_below=True)
        flow_payload = flow_report.to_dict()

    # histogram of lengths in fixed-width bins of mu/4 starting at mu,
    # plus fitted density curve samples for external plotting
    width = mu_eff / args.bins_per_t0
    top = float(lengths.max())
    edges = [mu_eff]
    while edges[-1] < top:
        edges.append(edges[-1] + width)
    hist, _ = np.histogram(lengths, bins=np.array(edges))
    curve_y = np.linspace(mu_eff * 1.001, max(top, 2 * mu_eff), args.curve_points)
    curve = {"y": curve_y.tolist(), "density": [], "singleton_mass": None}
    if lam > 0:
        curve["density"] = clump_density(curve_y, lam, mu_eff).tolist()
        curve["singleton_mass"] = singleton_mass(lam, mu_eff)

    summary = RunSummary(
        run_id=Path(args.input).stem, n_raw=len(records) + len(rejects),
        n_removed=len(rejects) + removal.n_removed, n=sample.n,
        ybar=sample.ybar, s2y=sample.s2y, vbar=vbar, domain=args.domain,
    )
    payload = _metadata("analyze", args)
    payload.update({
        "run": summary.to_dict(),
        "removal_reasons": removal.counts_by_reason(),
        "n_parse_rejects": len(rejects),
        "estimates": estimates,
        "flow": flow_payload,
        "histogram": {"edges": edges, "counts": hist.tolist(),
                      "n_below_t0": int(np.count_nonzero(lengths < mu_eff))},
        "density_curve": curve,
    })
    if args.domain == "physical":
        payload["time_domain_equivalent"] = {
            "lambda_per_msec": rate_to_time_domain(lam, vbar),
            "t0_msec": args.mu / vbar,
            "vbar_mm_per_msec": vbar,
        }
    _write_json(out / "report.json", payload)
    print(f"analyze: n={sample.n} lambda={lam:.4g} -> {out / 'report.json'}")
    return 0


def _normality_ks(values: np.ndarray) -> dict:
    """KS of standardized values against the standard normal; flags degeneracy."""
    from scipy.special import ndtr

    values = np.asarray(values, dtype=float)
    sd = values.std(ddof=1)
    if np.ptp(values) == 0.0 or sd == 0.0:
        return {"statistic": 0.5, "p_value": 0.0, "degenerate": True}
    z = (values - values.mean()) / sd
    stat = ks_statistic(z, lambda x: ndtr(x))
    return {"statistic": stat, "p_value": ks_pvalue(stat, values.size),
            "degenerate": False}


def cmd_gof(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = _metadata("gof", args)
    if args.replicates is None and args.clumps is None:
        raise DataError("gof needs --replicates and/or --clumps input")

    if args.replicates is not None:
        try:
            data = json.loads(Path(args.replicates).read_text())
        except OSError as exc:
            raise DataError(f"cannot read {args.replicates}: {exc}") from exc
        cells_payload = {}
        for key, rows in data.get("cells", {}).items():
            n_reps = len(rows["lambda_m"])
            if n_reps < 10:
                print(f"warning: cell {key} has {n_reps} < 10 replicates; "
                      "normality diagnostics are unreliable", file=sys.stderr)
            cells_payload[key] = {
                "n_replicates": n_reps,
                "lambda_m": _normality_ks(np.array(rows["lambda_m"])),
                "n": _normality_ks(np.array(rows["n"], dtype=float)),
                "a1": _normality_ks(np.array(rows["a1"])),
                "quantile_plot": {
                    "lambda_m_sorted": sorted(rows["lambda_m"]),
                },
            }
        payload["replicate_normality"] = cells_payload

    if args.clumps is not None:
        lengths = []
        try:
            with open(args.clumps, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or "length" not in reader.fieldnames:
                    raise DataError(f"{args.clumps} has no 'length' column")
                for row in reader:
                    lengths.append(float(row["length"]))
        except OSError as exc:
            raise DataError(f"cannot read {args.clumps}: {exc}") from exc
        if not lengths:
            raise DataError(f"no clump rows in {args.clumps}")
        sample = build_sample(np.array(lengths), args.mu)
        lam = m_estimate(sample).lambda_hat
        if lam <= 0:
            raise NumericsError("fitted intensity is nonpositive; GOF undefined")
        from .model import clump_cdf

        # snap classified singletons onto the atom before scoring the fit,
        # scoring the lower gap against the left limit of F at the atom
        y = sample.lengths.copy()
        y[np.abs(y - args.mu) <= args.mu * 1e-6] = args.mu
        mass = singleton_mass(lam, args.mu)

        def cdf_left(x):
            x = np.asarray(x, dtype=float)
            return clump_cdf(x, lam, args.mu) - mass * (np.abs(x - args.mu) <= args.mu * 1e-9)

        stat = ks_statistic(y, lambda x: clump_cdf(x, lam, args.mu), cdf_left=cdf_left)
        qs = np.linspace(0.05, 0.95, 19)
        payload["clump_length_fit"] = {
            "n": sample.n,
            "lambda_hat": lam,
            "ks_statistic": stat,
            "ks_critical_99": 1.63 / math.sqrt(sample.n),
            "quantile_plot": {
                "probs": qs.tolist(),
                "empirical": np.quantile(sample.lengths, qs).tolist(),
            },
        }
    _write_json(out / "gof.json", payload)
    print(f"gof -> {out / 'gof.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boolean-flow",
        description="Linear Boolean particle-flow model: simulation, "
                    "intensity estimation, and total-flow estimation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def positive(name):
        def check(text):
            value = float(text)
            if not value > 0:
                raise argparse.ArgumentTypeError(f"{name} must be > 0")
            return value
        return check

    sim = sub.add_parser("simulate", help="replicated ground-truth simulation")
    sim.add_argument("--lambda", dest="lam", type=positive("lambda"), required=True)
    sim.add_argument("--t", type=positive("t"), required=True)
    sim.add_argument("--mu", type=positive("mu"), default=5.0)
    sim.add_argument("--sigma", type=float, default=0.0)
    sim.add_argument("--reps", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="sim_out")
    sim.set_defaults(func=cmd_simulate)

    for name, func in (("table1", cmd_table1), ("table2", cmd_table2)):
        t = sub.add_parser(name, help=f"reproduce {name} of the simulation study")
        t.add_argument("--reps", type=int, default=500)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--cells", default=None,
                       help="comma-separated sigma:t:lambda; default full grid")
        t.add_argument("--mu", type=positive("mu"), default=5.0)
        t.add_argument("--out", default=f"{name}_out")
        t.set_defaults(func=func)

    an = sub.add_parser("analyze", help="ingest and analyze counter records")
    an.add_argument("--input", required=True)
    an.add_argument("--schema", choices=("dtf_dtb", "v_cl"), default="dtf_dtb")
    an.add_argument("--mu", type=positive("mu"), default=4.45,
                    help="known mean particle diameter, mm")
    an.add_argument("--domain", choices=("physical", "time"), default="physical")
    an.add_argument("--min-frac", dest="min_frac", type=float, default=0.5)
    an.add_argument("--singleton-tol", dest="singleton_tol", type=float, default=1e-6)
    an.add_argument("--bins-per-t0", dest="bins_per_t0", type=int, default=4)
    an.add_argument("--curve-points", dest="curve_points", type=int, default=200)
    an.add_argument("--out", default="analyze_out")
    an.set_defaults(func=cmd_analyze)

    gof = sub.add_parser("gof", help="goodness-of-fit diagnostics")
    gof.add_argument("--replicates", default=None,
                     help="table1_replicates.json from a table1 run")
    gof.add_argument("--clumps", default=None, help="clump CSV from simulate")
    gof.add_argument("--mu", type=positive("mu"), default=5.0)
    gof.add_argument("--out", default="gof_out")
    gof.set_defaults(func=cmd_gof)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "reps", 1) < 1:
        parser.error("--reps must be >= 1")
    if getattr(args, "sigma", 0.0) < 0:
        parser.error("--sigma must be >= 0")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
