"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error,
3 failed verification check.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

from isfedavg.exceptions import ConfigError
from isfedavg.federated import SCHEMES
from isfedavg.harness import (
    ExperimentSpec,
    build_problem,
    constants_table,
    format_rows,
    load_config,
    run_experiment,
)
from isfedavg.metrics import to_db

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

SWEEP_PARAMS = {"mu": "step_size", "step_size": "step_size"}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; that code is reserved for runtime errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="isfedavg", description="Importance-sampled federated averaging simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment and write CSV traces")
    run.add_argument("--config", required=True)
    run.add_argument("--scheme", action="append", choices=SCHEMES,
                     help="scheme to run; repeat for several (default: config's list)")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (default: config's out, else ./out)")
    run.add_argument("--repetitions", type=int)
    run.add_argument("--iterations")

    ver = sub.add_parser("verify", help="run the exact-enumeration and Monte-Carlo checks")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--quick", action="store_true", help="smaller Monte-Carlo budgets")

    sw = sub.add_parser("sweep", help="steady-state metric across values of one parameter")
    sw.add_argument("--config", required=True)
    sw.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    sw.add_argument("--values", required=True, nargs="+", type=float)
    sw.add_argument("--scheme", action="append", choices=SCHEMES)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out")

    con = sub.add_parser("constants", help="print the convergence constants for a config")
    con.add_argument("--config", required=True)
    con.add_argument("--scheme", action="append", choices=SCHEMES)
    con.add_argument("--seed", type=int)
    return p


def _iterations(value):
    if value is None or value == "auto":
        return value
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"iterations must be an integer or 'auto', not {value!r}") from None


def _spec(args, **extra) -> ExperimentSpec:
    mapping = load_config(args.config)
    overrides = dict(seed=args.seed, schemes=getattr(args, "scheme", None))
    overrides.update(extra)
    return ExperimentSpec.from_mapping(mapping, **overrides)


def cmd_run(args) -> int:
    spec = _spec(args, out=args.out, repetitions=args.repetitions,
                 iterations=_iterations(args.iterations))
    if spec.out is None:
        spec.out = "out"
    result = run_experiment(spec)
    rows = [(s, n, v) for s, n, v in result.summary_rows()]
    print(format_rows(rows, header=("scheme", "name", "value")), end="")
    print(f"wrote CSV files to {spec.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from isfedavg.verification import run_checks

    results = run_checks(seed=args.seed, quick=args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_sweep(args) -> int:
    field = SWEEP_PARAMS[args.param]
    base = _spec(args)
    problem = build_problem(base)
    rows = []
    for value in args.values:
        spec = ExperimentSpec.from_mapping(base.as_dict(), **{field: value, "out": None})
        result = run_experiment(spec, problem, with_constants=False)
        for scheme, trace in result.traces.items():
            ss = trace.steady_state(spec.steady_fraction)
            db = to_db(ss) if trace.metric == "msd" else float("nan")
            rows.append((scheme, value, ss, db))
    print(format_rows(rows, header=("scheme", args.param, "steady_state", "steady_state_db")), end="")
    for scheme in base.schemes:
        vals = [(v, ss) for s, v, ss, _ in rows if s == scheme]
        for (v1, s1), (v2, s2) in zip(vals, vals[1:]):
            if s2 > 0:
                print(f"{scheme}: ratio {args.param}={v1:g} / {args.param}={v2:g} -> {s1 / s2:.4g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scheme", args.param, "steady_state", "steady_state_db"])
            for scheme, value, ss, db in rows:
                w.writerow([scheme, repr(float(value)), repr(float(ss)), repr(float(db))])
    return EXIT_OK


def cmd_constants(args) -> int:
    spec = _spec(args)
    problem = build_problem(spec)
    table = constants_table(spec, problem, spec.schemes)
    for scheme, rows in table.items():
        print(f"[{scheme}]")
        print(format_rows(rows), end="")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "sweep": cmd_sweep, "constants": cmd_constants}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
