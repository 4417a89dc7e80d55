"""Command-line interface: validate, truth, estimate, simulate, report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd

from .data import read_panel_csv, validate_panel
from .estimators import (EstimationError, ModelBundle, bootstrap_ci, estimate_ice, estimate_ipw,
                         estimate_tmle_crossfit, estimate_wice)
from .interventions import make_multiplicative_shift, spec_from_config
from .oracle import enumerate_gformula, mc_truth
from .simlab import MetricsRow, default_workers, load_grid, make_dgp, run_scenario

log = logging.getLogger("stochsurv")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
METHODS = ("ipw", "ice", "wice", "tmle")
REPORT_METRICS = ("bias", "se", "rmse")


class UsageError(Exception):
    pass


def _delta(text: str) -> float:
    d = float(text)
    if not 0.0 <= d <= 1.0:
        raise argparse.ArgumentTypeError(f"delta must lie in [0, 1], got {d}")
    return d


def _existing(text: str) -> Path:
    p = Path(text)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochsurv",
                                 description="Survival under stochastic treatment interventions.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a panel CSV against the data contract")
    v.add_argument("--panel", type=_existing, required=True)
    v.add_argument("--indicator", default="lstar")

    t = sub.add_parser("truth", help="target value under a simulation DGP")
    t.add_argument("--dgp", required=True, choices=("study1", "study2"))
    t.add_argument("--delta", type=_delta, action="append")
    t.add_argument("--draws", type=int, default=10**6)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--exact", action="store_true", help="enumerate instead of simulating")
    t.add_argument("--dgp-option", action="append", default=[], metavar="KEY=VALUE")

    e = sub.add_parser("estimate", help="estimate survival on a panel CSV")
    e.add_argument("--panel", type=_existing, required=True)
    e.add_argument("--method", choices=METHODS, required=True)
    e.add_argument("--delta", type=_delta, default=0.5)
    e.add_argument("--intervention", help="JSON intervention config; overrides --delta")
    e.add_argument("--indicator", default="lstar")
    e.add_argument("--treatment", help="treatment formula (default: main effects)")
    e.add_argument("--outcome", help="outcome formula (default: main effects with a)")
    e.add_argument("--censoring", help="censoring formula (default: as outcome)")
    e.add_argument("--ensemble", action="store_true", help="use the stacked learner library")
    e.add_argument("--absorbing", action="store_true", help="treatment is absorbing")
    e.add_argument("--weight-cap", type=float, default=None)
    e.add_argument("-M", "--folds", type=int, default=2)
    e.add_argument("-B", "--bootstrap", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--eif-components", type=Path, help="write per-subject EIF terms (tmle)")

    s = sub.add_parser("simulate", help="run a scenario grid")
    s.add_argument("--grid", type=_existing, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the grid seeds")
    s.add_argument("--replicates", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--records", type=Path, help="per-replicate CSV")

    r = sub.add_parser("report", help="format a results CSV")
    r.add_argument("results", type=_existing)
    r.add_argument("--out", type=Path, help="also write the pivoted table as CSV")
    return ap


def _parse_options(items) -> dict:
    out = {}
    for it in items:
        if "=" not in it:
            raise UsageError(f"expected KEY=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = v
    return out


# commands ------------------------------------------------------------------------

def cmd_validate(args, out) -> int:
    panel = read_panel_csv(args.panel, indicator=args.indicator)
    problems = validate_panel(panel)
    for p in problems:
        print(str(p), file=out)
    print(json.dumps({"subjects": panel.n, "horizon": panel.horizon,
                      "violations": len(problems)}), file=out)
    return EXIT_OK if not problems else EXIT_FAIL


def cmd_truth(args, out) -> int:
    law = make_dgp(args.dgp, **_parse_options(args.dgp_option))
    deltas = args.delta or [0.5]
    for d in deltas:
        spec = make_multiplicative_shift(d)
        if args.exact:
            rec = {"delta": d, "psi": enumerate_gformula(law, spec), "mc_se": 0.0,
                   "draws": 0, "seed": None}
        else:
            rec = {"delta": d, **mc_truth(law, spec, args.draws, args.seed).to_dict()}
        print(json.dumps(rec, sort_keys=True), file=out)
    return EXIT_OK


def _default_formulas(panel, args):
    names = [*panel.covariate_names, *panel.baseline_names]
    trt = args.treatment or " + ".join(names) or "1"
    outc = args.outcome or " + ".join(["a", *names])
    cen = args.censoring or outc
    return trt, outc, cen


def cmd_estimate(args, out) -> int:
    panel = read_panel_csv(args.panel, indicator=args.indicator)
    problems = validate_panel(panel)
    if problems:
        raise EstimationError("panel is invalid: " + "; ".join(map(str, problems[:5])))
    if args.intervention:
        spec = spec_from_config(json.loads(args.intervention))
    else:
        spec = make_multiplicative_shift(args.delta, args.indicator)
    trt, outc, cen = _default_formulas(panel, args)
    bundle = ModelBundle.build(panel.horizon, trt, outc, cen if panel.has_censoring else None,
                               learner_mode="ensemble" if args.ensemble else "parametric",
                               absorbing_treatment=args.absorbing)

    def run(p):
        if args.method == "ipw":
            return estimate_ipw(p, spec, bundle, truncate=args.weight_cap, seed=args.seed)
        if args.method == "ice":
            return estimate_ice(p, spec, bundle, seed=args.seed)
        if args.method == "wice":
            return estimate_wice(p, spec, bundle, truncate=args.weight_cap, seed=args.seed)
        return estimate_tmle_crossfit(p, spec, bundle, M=args.folds, seed=args.seed,
                                      truncate=args.weight_cap)

    res = run(panel)
    if args.bootstrap:
        lo, hi, fails = bootstrap_ci(lambda p: run(p).psi_hat, panel, args.bootstrap, args.seed)
        res.ci_low, res.ci_high = lo, hi
        res.diagnostics["bootstrap"] = {"B": args.bootstrap, "failures": fails}
    if args.eif_components:
        if args.method != "tmle":
            raise UsageError("--eif-components is available with --method tmle")
        rows = res.artifacts["components"]
        pd.DataFrame(rows, columns=["id", "term", "value"]).to_csv(
            args.eif_components, index=False, float_format="%.17g")
    print(res.to_json(), file=out)
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    configs = load_grid(args.grid)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    workers = default_workers() if args.workers is None else args.workers
    rows, records, any_failed = [], [], False
    for cfg in configs:
        if overrides:
            cfg = replace(cfg, **overrides)
        row, recs = run_scenario(cfg, workers=workers)
        any_failed |= row.failed
        if row.failed:
            log.error("scenario %s failed: %d of %d replicates", cfg.label, row.failures,
                      cfg.replicates)
        rows.append(row.as_row())
        records.extend({"scenario_id": cfg.label, **r} for r in recs)
    _write_csv(args.out, list(MetricsRow.COLUMNS), rows)
    if args.records:
        _write_csv(args.records, ["scenario_id", "replicate", "psi_hat", "ci_low", "ci_high",
                                  "error"], records)
    print(f"wrote {len(rows)} scenario rows to {args.out}", file=out)
    return EXIT_FAIL if any_failed else EXIT_OK


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


REPORT_REQUIRED = ("dgp", "estimator", "n", *REPORT_METRICS)


def format_report(df: pd.DataFrame):
    """Estimator by n table of bias, SE and RMSE (times 100), one block per DGP.

    Returns ``(text, table)`` where ``table`` is the long pivoted frame.
    """
    missing = [c for c in REPORT_REQUIRED if c not in df.columns]
    if missing:
        raise UsageError(f"results file is missing columns {missing}")
    if df.empty:
        return "", pd.DataFrame(columns=["dgp", "estimator"])
    scaled = df.copy()
    for c in REPORT_METRICS:
        scaled[c] = 100.0 * scaled[c].astype(float)
    extra = [c for c in ("scenario", "delta") if c in df.columns and df[c].nunique() > 1]
    keys = ["dgp", *extra, "estimator"]
    table = scaled.pivot_table(index=keys, columns="n", values=list(REPORT_METRICS),
                               aggfunc="first", sort=True)
    table = table.reorder_levels([1, 0], axis=1).sort_index(axis=1, level=0, sort_remaining=False)
    ordered = [(n, m) for n in sorted(scaled["n"].unique()) for m in REPORT_METRICS]
    table = table.reindex(columns=pd.MultiIndex.from_tuples(ordered))
    blocks = []
    for dgp, sub in table.groupby(level=0, sort=True):
        sub = sub.droplevel(0)
        blocks.append(f"== {dgp} (values x 100) ==\n" + sub.to_string(float_format="%.2f"))
    flat = table.copy()
    flat.columns = [f"n{n}_{m}" for n, m in flat.columns]
    return "\n\n".join(blocks), flat.reset_index()


def cmd_report(args, out) -> int:
    try:
        df = pd.read_csv(args.results)
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=list(MetricsRow.COLUMNS))
    text, table = format_report(df)
    if text:
        print(text, file=out)
    if args.out:
        table.to_csv(args.out, index=False, float_format="%.6g")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "truth": cmd_truth, "estimate": cmd_estimate,
            "simulate": cmd_simulate, "report": cmd_report}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
