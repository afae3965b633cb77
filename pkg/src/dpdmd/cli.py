"""Command-line entry point: ``dpdmd {run,replay,sweep,check-graph}``.

Exit codes
----------
0  success
2  usage or configuration error
3  file input/output error
4  engine invariant violation
5  verification failure (replay divergence, graph check failure)
6  offline comparator failure
"""

from __future__ import annotations

import argparse
import logging
import sys

from .algorithm import InvariantViolation
from .experiment import ConfigError, ExperimentConfig, build_graphs, replay, run_experiment, sweep
from .metrics import OracleError
from .network import check_assumption1
from .problem import TraceFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4
EXIT_VERIFY = 5
EXIT_ORACLE = 6


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpdmd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one seeded experiment and write its output bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override [instance] seed")
    p.add_argument("--out", help="override [output] dir")

    p = sub.add_parser("replay", help="re-run the engine and compare against a recorded trace.csv")
    p.add_argument("--trace", required=True)
    p.add_argument("--config", required=True)

    p = sub.add_parser("sweep", help="run one experiment per parameter value")
    p.add_argument("--config", required=True)
    p.add_argument("--param", help="parameter to vary (default: [sweep] param)")
    p.add_argument("--values", nargs="+", type=float, help="values (default: [sweep] values)")
    p.add_argument("--out", help="override [output] dir")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers")

    p = sub.add_parser("check-graph", help="generate the configured graph sequence and check its assumptions")
    p.add_argument("--config", required=True)
    return parser


def _dispatch(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.command == "run":
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["out_dir"] = args.out
        cfg = cfg.replace(**changes) if changes else cfg
        res = run_experiment(cfg)
        last = res.metrics[-1]
        print(f"wrote {res.out_dir}: T={cfg.T} Reg_dyn/T={last['reg_dyn_over_t']:.6g} "
              f"Violation/T={last['violation_over_t']:.6g}")
        return EXIT_OK
    if args.command == "replay":
        report = replay(args.trace, cfg)
        print(report)
        return EXIT_OK if report else EXIT_VERIFY
    if args.command == "sweep":
        table = sweep(cfg, args.param, args.values, args.out, args.jobs)
        print(f"wrote {table}")
        return EXIT_OK
    report = check_assumption1(build_graphs(cfg))
    print(report)
    return EXIT_OK if report else EXIT_VERIFY


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceFormatError as exc:
        print(f"trace format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OracleError as exc:
        print(f"comparator oracle failed: {exc}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
