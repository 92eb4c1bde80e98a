"""Command line interface.

Subcommands mirror the pipeline stages:

- ``synth``   writes a synthetic benchmark directory.
- ``fit``     fits every configured method over the experiment grid.
- ``eval``    evaluates persisted weights and writes metric tables.
- ``compare`` tests each method against the per-metric best.
- ``report``  renders the persisted tables as text or CSV.

Exit codes: 0 on success, 1 for invalid configuration or argument values,
2 for missing, malformed, or inconsistent data, 3 for unexpected internal
failures.
"""

from __future__ import annotations

import argparse
import sys

from .errors import (
    ArgumentError,
    CapacityError,
    DomainError,
    FormatError,
    IntegrityError,
    ValidationError,
)
from .pipeline import cmd_compare, cmd_eval, cmd_fit, cmd_report, cmd_synth, load_config

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="judgecal",
        description="Cluster-conditioned prompt-ensemble calibration for judge models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON run config path")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument(
            "--seed", type=int, default=None, help="override the config master seed"
        )
        return p

    p_synth = with_common(sub.add_parser("synth", help="generate a synthetic benchmark"))
    p_synth.add_argument(
        "--no-preference",
        action="store_true",
        help="also write a no-preference pair set under <out>/no_preference",
    )

    p_fit = with_common(sub.add_parser("fit", help="fit weights over the grid"))
    p_fit.add_argument("--parallel", type=int, default=1, help="worker process count")

    p_eval = with_common(sub.add_parser("eval", help="evaluate persisted weights"))
    p_eval.add_argument("--parallel", type=int, default=1, help="worker process count")

    p_cmp = with_common(sub.add_parser("compare", help="test methods against the best"))
    p_cmp.add_argument("--alpha", type=float, default=None, help="FDR level override")
    p_cmp.add_argument(
        "--baseline", default=None, help="compare against this method instead of the best"
    )

    p_rep = sub.add_parser("report", help="render persisted evaluation tables")
    p_rep.add_argument("--out", required=True, help="artifact directory")
    p_rep.add_argument("--format", choices=("table", "csv"), default="table")
    return parser


def _dispatch(args) -> int:
    if args.command == "report":
        sys.stdout.write(cmd_report(args.out, fmt=args.format))
        return EXIT_OK

    config = load_config(args.config, seed_override=args.seed)
    if args.command == "synth":
        cmd_synth(config, args.out, no_preference=args.no_preference)
        print(f"synth: wrote benchmark to {args.out}")
    elif args.command == "fit":
        manifest = cmd_fit(config, args.out, parallel=args.parallel)
        print(
            f"fit: {len(manifest['weights'])} weight files over "
            f"{len(manifest['cells'])} cells"
        )
    elif args.command == "eval":
        report = cmd_eval(config, args.out, parallel=args.parallel)
        failed = len(report["failed_cells"])
        print(
            f"eval: {len(report['cells']) - failed}/{len(report['cells'])} cells "
            f"evaluated" + (f", {failed} failed" if failed else "")
        )
    elif args.command == "compare":
        rows = cmd_compare(config, args.out, alpha=args.alpha, baseline=args.baseline)
        print(f"compare: {len(rows)} comparisons written")
    else:  # pragma: no cover - argparse enforces the choices
        raise ArgumentError(f"unknown command {args.command!r}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help; map usage
        # problems onto the validation exit code.
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    try:
        return _dispatch(args)
    except (ValidationError, DomainError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, IntegrityError, CapacityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
