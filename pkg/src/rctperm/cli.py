"""Command-line interface.

Exit status: 0 success, 1 usage error, 2 validation error, 3 oracle failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import config_schema, parse_config
from .errors import OracleError, RctPermError
from .estimators import (DEFAULT_RESAMPLES, ENUMERATION_CAP, TRIM, eval_ipw, eval_permuted_general,
                         eval_permuted_indexed, eval_raw)
from .experiment import run_mc_experiment, trial_seeds
from .oracle import run_oracle_suite
from .recordio import (ESTIMATE_REPORT_SCHEMA, TRIAL_RECORD_SCHEMA, dumps, load_trial_record,
                       report_to_dict, save_trial_record, write_text)
from .sim import generate_cohort, run_trial, sample_assignment

EXIT_USAGE, EXIT_INVALID, EXIT_ORACLE = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def schemas() -> dict:
    return {"trial_record": TRIAL_RECORD_SCHEMA, "estimate_report": ESTIMATE_REPORT_SCHEMA,
            "run_config": config_schema()}


def _emit(text: str, out) -> None:
    if out:
        write_text(out, text)
    else:
        sys.stdout.write(text)


def cmd_simulate(args) -> int:
    cfg = parse_config(args.config)
    if args.print_effective_config:
        print(json.dumps(cfg.effective(), indent=2))
        return 0
    trial = cfg.trial_config()
    cohort_seed, assign_seed, _ = trial_seeds(cfg.seed, 0)
    roster = generate_cohort(cfg.cohort_config(), cohort_seed)
    assignment = sample_assignment(roster, trial.arms, trial.n_per_arm, assign_seed)
    record = run_trial(roster, assignment, trial, trial.seed)
    save_trial_record(record, args.out)
    return 0


def cmd_estimate(args) -> int:
    record = load_trial_record(args.record)
    trim = None if args.no_trim else tuple(args.trim)
    if args.estimator == "raw":
        report = eval_raw(record)
    elif args.estimator == "permuted":
        report = eval_permuted_indexed(record)
    elif args.estimator == "permuted_general":
        report = eval_permuted_general(record, args.enumeration_cap)
    else:
        report = eval_ipw(record, args.target_arm, args.n_resamples, args.resample_seed, trim,
                          per_arm=args.per_arm)
    _emit(json.dumps(report_to_dict(report), indent=2) + "\n", args.out)
    return 0


def cmd_mc_experiment(args) -> int:
    cfg = parse_config(args.config)
    if args.print_effective_config:
        print(json.dumps(cfg.effective(), indent=2))
        return 0
    exp = cfg.experiment_config()
    if args.n_trials is not None:
        from dataclasses import replace
        exp = replace(exp, n_trials=args.n_trials)
    workers = args.workers if args.workers is not None else cfg.experiment.workers
    table = run_mc_experiment(exp, workers)
    csv_path = args.out_csv or cfg.experiment.output_csv or "experiment.csv"
    summary_path = args.out_summary or cfg.experiment.output_summary or "experiment_summary.json"
    write_text(csv_path, table.to_csv())
    summary = {"n_trials": exp.n_trials, "master_seed": exp.master_seed, "estimators": table.summary}
    write_text(summary_path, dumps(summary))
    return 0


def cmd_oracle(args) -> int:
    results = run_oracle_suite()
    failed = [r for r in results if not r["ok"]]
    for r in results:
        status = "PASS" if r["ok"] else "FAIL"
        line = f"{status} {r['name']}: {r['worlds']} worlds x {r['assignments']} assignments"
        if r["ok"]:
            u, v = r["unbiasedness"], r["variance"]
            line += f", bias {max(u['dagger'], u.get('upsilon') or 0.0):.1e}, variance identity {v['residual']:.1e}"
        print(line)
        for detail in r.get("details", []):
            print(f"    {detail}")
    if args.json:
        write_text(args.json, dumps(results))
    if failed:
        raise OracleError(f"{len(failed)} oracle instance(s) failed")
    return 0


def cmd_schema(args) -> int:
    docs = schemas()
    chosen = docs if args.which == "all" else {args.which: docs[args.which]}
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, schema in chosen.items():
            (out / f"{name}.schema.json").write_text(json.dumps(schema, indent=2) + "\n")
    else:
        print(json.dumps(chosen if args.which == "all" else chosen[args.which], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rctperm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run one trial from a config file and write its record")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="trial.json", help="record path; a .gz suffix compresses")
    p.add_argument("--print-effective-config", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="apply an estimator to a trial record")
    p.add_argument("--record", required=True)
    p.add_argument("--estimator", choices=["raw", "permuted", "permuted_general", "ipw"], default="permuted")
    p.add_argument("--enumeration-cap", type=int, default=ENUMERATION_CAP)
    p.add_argument("--n-resamples", type=int, default=DEFAULT_RESAMPLES)
    p.add_argument("--resample-seed", type=int, default=0)
    p.add_argument("--trim", type=float, nargs=2, default=list(TRIM), metavar=("LO", "HI"))
    p.add_argument("--no-trim", action="store_true")
    p.add_argument("--target-arm", type=int, default=None)
    p.add_argument("--per-arm", action="store_true", help="IPW: report per-source-arm terms for --target-arm")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("mc-experiment", help="run repeated trials and summarise estimator variance")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--n-trials", type=int, default=None)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-summary", default=None)
    p.add_argument("--print-effective-config", action="store_true")
    p.set_defaults(func=cmd_mc_experiment)

    p = sub.add_parser("oracle", help="run the exact checks on the built-in tiny instances")
    p.add_argument("--json", default=None, help="also write the full results here")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("schema", help="print the JSON schemas")
    p.add_argument("--which", choices=["all", "trial_record", "estimate_report", "run_config"], default="all")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except OracleError as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (RctPermError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
