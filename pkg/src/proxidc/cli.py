"""Command-line interface: ``proxidc {simulate,analyze,oracle,truth}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation error,
3 numerical non-convergence, 4 bridge parameters have no unique closed form.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .analysis import DEFAULT_LAMBDA_GRID, AnalysisOptions, analyze
from .bridges import EXP_LINEAR, LINEAR
from .data import DataValidationError, load_dataset, load_two_trials, read_schema
from .regression import ConvergenceError
from .simulation import (N_EXPERIMENTS, ExperimentConfig, NoClosedFormError,
                         closed_form_bridges, experiment_config, format_summary_table,
                         monte_carlo_truth, run_experiment)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_NO_CLOSED_FORM = 0, 1, 2, 3, 4

log = logging.getLogger("proxidc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _experiment_id(text: str) -> int:
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid experiment id {text!r}") from None
    if not 1 <= val <= N_EXPERIMENTS:
        raise argparse.ArgumentTypeError(f"experiment id must be in 1..{N_EXPERIMENTS}")
    return val


def _grid(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda grid {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("lambda grid must be nonempty and nonnegative")
    return vals


def _prob(text: str) -> float:
    val = float(text)
    if not 0 < val < 1:
        raise argparse.ArgumentTypeError("probability must lie in (0, 1)")
    return val


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="proxidc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run a Monte-Carlo experiment")
    sim.add_argument("--experiment", type=_experiment_id)
    sim.add_argument("--config", type=Path, help="JSON experiment config (overrides catalog)")
    sim.add_argument("--dump-config", action="store_true", help="print the config and exit")
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--n-mc", type=int, default=2_000_000)
    sim.add_argument("--threads", type=int, help="worker cap (default PROXIDC_THREADS)")
    sim.add_argument("--out", type=Path, help="output directory")
    sim.add_argument("--format", choices=("csv", "text"), default="text",
                     help="format echoed to stdout")
    sim.add_argument("--no-timestamp", action="store_true")

    ana = sub.add_parser("analyze", help="analyze two-trial CSV data")
    ana.add_argument("--source-csv", type=Path)
    ana.add_argument("--target-csv", type=Path)
    ana.add_argument("--data-csv", type=Path, help="single CSV with an s column")
    ana.add_argument("--schema", type=Path)
    ana.add_argument("--e-source", type=_prob, help="P(A=1) in the source trial")
    ana.add_argument("--e-target", type=_prob, help="P(A=-1) in the target trial")
    ana.add_argument("--lambda-grid", type=_grid, default=DEFAULT_LAMBDA_GRID)
    ana.add_argument("--k-folds", type=int, default=10)
    ana.add_argument("--cv-seed", type=int, default=0)
    ana.add_argument("--q-form", choices=(LINEAR, EXP_LINEAR), default=LINEAR)
    ana.add_argument("--drop-incomplete", action="store_true")
    ana.add_argument("--out", type=Path, help="report path (default stdout)")
    ana.add_argument("--format", choices=("csv", "text"), default="text")
    ana.add_argument("--no-timestamp", action="store_true")

    ora = sub.add_parser("oracle", help="closed-form bridges and true effect")
    ora.add_argument("--experiment", type=_experiment_id, required=True)
    ora.add_argument("--seed", type=int, default=314159)
    ora.add_argument("--n-mc", type=int, default=2_000_000)

    tru = sub.add_parser("truth", help="Monte-Carlo true effect in the target trial")
    tru.add_argument("--experiment", type=_experiment_id, required=True)
    tru.add_argument("--seed", type=int, required=True)
    tru.add_argument("--n-mc", type=int, default=2_000_000)
    return p


def _stamp(args) -> str:
    if args.no_timestamp:
        return ""
    return f"# generated {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}\n"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------

def _sim_config(args) -> ExperimentConfig:
    if args.config is not None:
        try:
            cfg = ExperimentConfig.from_dict(json.loads(args.config.read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
    elif args.experiment is not None:
        cfg = experiment_config(args.experiment)
    else:
        raise UsageError("simulate needs --experiment or --config")
    if args.n is not None:
        cfg.n = args.n
    if args.reps is not None:
        cfg.reps = args.reps
    if args.seed is not None:
        cfg.base_seed = args.seed
    elif args.config is None and not args.dump_config:
        raise UsageError("simulate needs --seed")
    if cfg.n < 50 or cfg.reps < 1:
        raise UsageError("need n >= 50 and reps >= 1")
    return cfg


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    if args.dump_config:
        print(cfg.dumps())
        return EXIT_OK
    result = run_experiment(cfg, threads=args.threads, n_mc=args.n_mc)
    rows = [dict(s.scaled(), truth=result.truth) for s in result.summary.values()]
    summary_csv = _csv_text(rows)
    text = format_summary_table(result) + "\n"
    reps_csv = _csv_text([dict(rep=r.rep, estimator=r.estimator, point=r.point, se=r.se,
                               converged=int(r.converged), note=r.note) for r in result.reps])
    if args.out is not None:
        try:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "summary.csv").write_text(summary_csv)
            (args.out / "summary.txt").write_text(_stamp(args) + text)
            (args.out / "reps.csv").write_text(reps_csv)
            (args.out / "config.json").write_text(cfg.dumps() + "\n")
        except OSError as exc:
            raise UsageError(f"cannot write output: {exc}") from exc
    sys.stdout.write(summary_csv if args.format == "csv" else text)
    if any(s.converged == 0 for s in result.summary.values()):
        log.error("an estimator had zero converged replications")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_analyze(args) -> int:
    schema = read_schema(args.schema) if args.schema else None
    if args.data_csv is not None:
        if args.source_csv or args.target_csv:
            raise UsageError("give either --data-csv or both --source-csv and --target-csv")
        ds = load_dataset(args.data_csv, schema, args.e_source, args.drop_incomplete)
    elif args.source_csv is not None and args.target_csv is not None:
        ds = load_two_trials(args.source_csv, args.target_csv, schema, args.e_source,
                             args.drop_incomplete)
    else:
        raise UsageError("analyze needs --source-csv and --target-csv (or --data-csv)")
    e_source = float(ds.e1[ds.source][0])
    e_target = args.e_target
    if e_target is None:
        a_t = ds.a[ds.target]
        e_target = float(np.mean(a_t[~np.isnan(a_t)] == -1))
        warnings.warn(f"e-target not supplied; using the empirical proportion {e_target:.4f}",
                      stacklevel=1)
    opts = AnalysisOptions(e_source, e_target, tuple(args.lambda_grid), args.k_folds,
                           args.cv_seed, args.q_form)
    report = analyze(ds, opts)
    rows = []
    for r in report.rows:
        row = {k: v for k, v in r.as_row().items()}
        extra = {k: v for k, v in row.items()
                 if k not in ("estimand", "point", "se", "ci_low", "ci_high", "n_used")}
        rows.append({"estimand": r.estimand, "point": r.point, "se": r.se, "ci_low": r.ci_low,
                     "ci_high": r.ci_high, "n_used": r.n_used,
                     "diagnostics": json.dumps(extra, sort_keys=True, default=str)})
    if args.format == "csv":
        body = _csv_text(rows)
    else:
        lines = [f"{'estimand':<16} {'point':>10} {'se':>9} {'ci_low':>10} {'ci_high':>10}"]
        for r in rows:
            lines.append(f"{r['estimand']:<16} {r['point']:>10.4f} {r['se']:>9.4f} "
                         f"{r['ci_low']:>10.4f} {r['ci_high']:>10.4f}")
        lines.append(f"lambda_h = {report.diagnostics['lambda_h']:g}, "
                     f"lambda_q = {report.diagnostics['lambda_q']:g}; theta = ATE(-1 vs 0) - psi "
                     "= E{Y(-1)-Y(1)|S=0}")
        body = _stamp(args) + "\n".join(lines) + "\n"
    if args.out is not None:
        try:
            args.out.write_text(body)
        except OSError as exc:
            raise UsageError(f"cannot write output: {exc}") from exc
    else:
        sys.stdout.write(body)
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = experiment_config(args.experiment)
    truth, se = monte_carlo_truth(cfg.dgp, args.n_mc, args.seed)
    code = EXIT_OK
    try:
        eta, xi = closed_form_bridges(cfg.dgp)
        print("eta* (1, W, X): " + " ".join(f"{v:.6g}" for v in eta))
        print("xi*  (1, Z, X): " + " ".join(f"{v:.6g}" for v in xi))
    except NoClosedFormError as exc:
        print(f"experiment {args.experiment}: {exc}")
        code = EXIT_NO_CLOSED_FORM
    print(f"psi truth: {truth:.6f} (MC se {se:.2e})")
    return code


def cmd_truth(args) -> int:
    cfg = experiment_config(args.experiment)
    truth, se = monte_carlo_truth(cfg.dgp, args.n_mc, args.seed)
    print(f"{truth:.8f} {se:.3e}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "oracle": cmd_oracle,
            "truth": cmd_truth}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"proxidc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, FileNotFoundError) as exc:
        print(f"proxidc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, np.linalg.LinAlgError) as exc:
        print(f"proxidc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
