"""Command line entry point: ``smmal {simulate,estimate,study,validate}``.

Exit codes: 0 success, 1 runtime failure (structured diagnostic on stderr),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .crossfit import DRConfig, SplineLearnerConfig, assign_folds, crossfit_dr, crossfit_lowdim
from .datamodel import read_csv, validate_dataset, write_csv
from .dgp import HIGHDIM_FLAGS, ScenarioSpec, SurrogateSpec, generate
from .estimators import smmal_estimate, supervised_dml_estimate, supervised_dr_estimate
from .harness import METHODS, ConfigError, load_config, metrics_csv_text, run_study

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smmal", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset as CSV")
    p.add_argument("--scenario", choices=("lowdim", "highdim"), default="lowdim")
    p.add_argument("--N", type=int, default=10000)
    p.add_argument("--n", type=int, default=500, help="number of labeled rows")
    p.add_argument("--p", type=int, default=None, help="confounder dimension (highdim)")
    p.add_argument("--flag", choices=HIGHDIM_FLAGS, default="correct_both")
    p.add_argument("--auc-a", type=float, default=0.95)
    p.add_argument("--auc-y", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--truth", help="optional JSON path for the truth record")

    p = sub.add_parser("estimate", help="run one estimator on a dataset CSV")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--M", type=float, default=2.0, help="truncation constant (DR methods)")

    p = sub.add_parser("study", help="run a Monte-Carlo study from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="output directory (overrides the config)")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default SMMAL_THREADS or all CPUs)")

    p = sub.add_parser("validate", help="run the invariant suites")
    p.add_argument("--quick", action="store_true", help="smaller fixture counts")
    return ap


def _fail(kind: str, exc: BaseException, code: int = EXIT_RUNTIME) -> int:
    diag = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(diag), file=sys.stderr)
    return code


def _cmd_simulate(args) -> int:
    spec = ScenarioSpec(args.scenario, args.N, args.n, args.p, args.flag, args.seed)
    data, truth = generate(spec, SurrogateSpec.from_auc(args.auc_a, args.auc_y))
    write_csv(data, args.out)
    if args.truth:
        rec = asdict(truth)
        Path(args.truth).write_text(json.dumps(rec, default=float, indent=1))
    print(json.dumps({"out": args.out, "N": data.n_rows, "n": data.n_labeled, "ate": truth.ate}))
    return EXIT_OK


def _cmd_estimate(args) -> int:
    data = read_csv(args.data)
    report = validate_dataset(data)
    if not report.ok:
        raise ValueError(f"invalid dataset: {', '.join(report.violations)}")
    if not 0 < args.alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    plan = assign_folds(data.n_rows, args.K, args.seed)
    if args.method == "smmal_spline":
        preds = crossfit_lowdim(data, plan, SplineLearnerConfig(seed=args.seed))
        est = smmal_estimate(data, preds, args.alpha)
    elif args.method == "smmal_dr":
        preds = crossfit_dr(data, plan, DRConfig(seed=args.seed), args.M)
        est = smmal_estimate(data, preds, args.alpha)
    elif args.method == "dml_supervised":
        est = supervised_dml_estimate(data, args.K, SplineLearnerConfig(seed=args.seed),
                                      args.alpha, plan=plan.restrict(data.labeled))
    else:
        est = supervised_dr_estimate(data, args.K, DRConfig(seed=args.seed), args.M, args.alpha,
                                     plan=plan.restrict(data.labeled))
    print(est.to_json(args.method, args.seed))
    return EXIT_OK


def _cmd_study(args) -> int:
    config = load_config(args.config)
    res = run_study(config, workers=args.workers, output=args.output)
    sys.stdout.write(metrics_csv_text(res.metrics))
    for key, path in res.paths.items():
        print(f"# {key}: {path}", file=sys.stderr)
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .validation import run_suites
    results = run_suites(quick=args.quick)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"simulate": _cmd_simulate, "estimate": _cmd_estimate,
               "study": _cmd_study, "validate": _cmd_validate}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        return _fail("runtime", exc)


if __name__ == "__main__":
    sys.exit(main())
