"""Command-line entry point: ``mucio <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from .harness import (
    ConfigError,
    ExperimentConfig,
    default_workers,
    record_line,
    run_experiment,
    scaling_sweep,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default from $MUCIO_WORKERS)")
    p.add_argument("--output", help="write JSON lines here as well as to stdout")
    p.add_argument("--config", help="JSON file whose fields override the flags")
    p.add_argument("--quiet", action="store_true", help="print only the summary line")


def _tamper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--mode", choices=["additive", "mucio", "mucio-abort"])
    p.add_argument("--oracle", choices=["exact", "threshold", "mc"])
    p.add_argument("--sizing", choices=["paper", "hoeffding", "fixed"])
    p.add_argument("--m-eval", dest="m_eval", type=int)
    p.add_argument("--m-max", dest="m_max", type=int)
    p.add_argument("--weights", help="uniform, split, or a file of n weights")
    p.add_argument("--cap", choices=["none", "worst"])
    p.add_argument("--case0-first", dest="case0_first", action="store_true", default=None)
    p.add_argument("--audit", action="store_true", default=None, help="check transcript invariants; exit 2 on violations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mucio", description="Online tampering experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tamper", help="tampering attack on a binomial threshold set")
    _tamper_flags(p)
    _common(p)

    p = sub.add_parser("oracle-check", help="audit the sampling oracle against exact values")
    p.add_argument("--n", type=int)
    p.add_argument("--sizing", choices=["paper", "hoeffding"])
    p.add_argument("--queries", type=int, help="prefixes and draws per instance")
    _common(p)

    for name, helptext in (
        ("reduce-l1", "Gaussian attack under l1 through the cube embedding"),
        ("gauss-l2", "Gaussian attack under l2"),
        ("sphere", "attack on the unit sphere"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--n", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--set", choices=["halfspace", "dictator"])
        p.add_argument("--m-eval", dest="m_eval", type=int)
        p.add_argument("--m-max", dest="m_max", type=int)
        p.add_argument("--m-g", dest="m_g", type=int)
        _common(p)

    p = sub.add_parser("mcdiarmid", help="move points below the mean plus a margin")
    p.add_argument("--n", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--function", choices=["sum", "weighted-sum"])
    p.add_argument("--band", type=float, help="also refine into [eta - band, eta + band]")
    _common(p)

    p = sub.add_parser("cointoss", help="bias a coin-tossing protocol")
    p.add_argument("--parties", dest="n", type=int)
    p.add_argument("--protocol", choices=["majority"])
    p.add_argument("--budget", dest="budget_const", type=float, help="cap constant c in c*sqrt(n ln(1/(eps*delta)))")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--audit", action="store_true", default=None)
    _common(p)

    p = sub.add_parser("lowerbound", help="i.i.d. radius-limited queries against capped tampering")
    p.add_argument("--n", type=int)
    p.add_argument("--radius-exp", dest="radius_exp", type=float)
    p.add_argument("--queries", type=int)
    p.add_argument("--m-eval", dest="m_eval", type=int)
    _common(p)

    p = sub.add_parser("sweep", help="tamper experiments over several n with a budget fit")
    p.add_argument("--n-values", dest="n_values", type=int, nargs="+", required=True)
    _tamper_flags(p)
    _common(p)
    return parser


DEFAULTS = {
    "tamper": {},
    "oracle-check": {"n": 8, "sizing": "hoeffding", "queries": 1000, "trials": 3},
    "reduce-l1": {"n": 16, "epsilon": 0.5, "delta": 0.2, "m_eval": 400, "m_max": 4},
    "gauss-l2": {"n": 256, "epsilon": 0.5, "delta": 0.2, "m_eval": 200, "m_max": 4},
    "sphere": {"n": 256, "epsilon": 0.5, "delta": 0.2, "m_eval": 200, "m_max": 4},
    "mcdiarmid": {"n": 400, "epsilon": 0.5, "delta": 0.1},
    "cointoss": {"n": 200, "epsilon": 0.5, "delta": 0.1},
    "lowerbound": {"n": 400, "epsilon": 0.5, "delta": 0.1, "m_eval": 500},
    "sweep": {"oracle": "threshold", "mode": "mucio", "epsilon": 0.5},
}

_SKIP = {"command", "config", "quiet", "n_values"}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    kind = "tamper" if args.command == "sweep" else args.command
    data = {"kind": kind, "workers": default_workers()}
    data.update(DEFAULTS.get(args.command, {}))
    data.update({k: v for k, v in vars(args).items() if k not in _SKIP and v is not None})
    if args.config:
        with open(args.config) as fh:
            data.update(json.load(fh))
    return ExperimentConfig.from_dict(data).validate()


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if args.command == "sweep":
        report = scaling_sweep(cfg, args.n_values)
        print(json.dumps({
            "type": "sweep",
            "n_values": report.n_values,
            "mean_budgets": report.mean_budgets,
            "scale": report.scale,
            "slope": report.fit.slope,
            "residuals": report.fit.residuals,
            "flagged": report.fit.flagged,
        }, sort_keys=True))
        return EXIT_OK

    result = run_experiment(cfg)
    if not args.quiet:
        for rec in result.records:
            print(record_line(rec))
    print(json.dumps(result.summary, sort_keys=True))
    violations = sum(len(r.extra.get("violations", [])) for r in result.records)
    if violations:
        print(f"{violations} invariant violations detected", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
