"""Command line entry points: lab run / lab report / lab bench.

Exit codes: 0 success, 2 precondition or usage error, 3 numerical
failure (a run finished but was flagged unreliable).
"""

from __future__ import annotations

import argparse
import sys

from .bench import run_bench
from .errors import NumericalFailure, PreconditionError
from .runner import default_output_root, emit_report, run_experiment

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lab",
        description="Reflected-diffusion laboratory: batch experiments, "
                    "reports, and the shipped benchmark suite.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment config")
    run.add_argument("config", help="path to a TOML experiment config")
    run.add_argument("--out", default=None,
                     help="output root (default: $LAB_OUTPUT_ROOT or "
                          "./lab_runs)")

    rep = sub.add_parser("report", help="collate manifests into a report")
    rep.add_argument("dir", help="directory holding run outputs")

    bench = sub.add_parser("bench", help="run the shipped benchmark suite")
    bench.add_argument("--out", default=None,
                       help="output root (default: <output root>/bench)")
    bench.add_argument("--seed", type=int, default=None,
                       help="override the master seed of every config")
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            result = run_experiment(args.config, args.out)
            print(f"wrote {result.out_dir}")
            for k in ("lambda", "y0", "J", "L_hat"):
                if k in result.summary:
                    print(f"  {k} = {result.summary[k]}")
            if result.summary.get("all_pass") is False:
                print("  some declared checks FAILED")
            return result.status
        if args.command == "report":
            text, _rows, status = emit_report(args.dir)
            print(text, end="")
            return status
        if args.command == "bench":
            return run_bench(args.out, args.seed)
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    sys.exit(main())
