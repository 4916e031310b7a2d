"""Command line entry point.

Usage: layerpot <task> --config path.json [--out dir] [--baseline dir]

Tasks: verify, dirichlet, neumann, kkpt-sweep, estimates, fundsol,
tdep-fundsol.  Exit codes: 0 pass, 1 invariant failure, 2 config error.
The only environment variable honored is LAYERPOT_THREADS (worker count
for parameter sweeps).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .harness import (
    TASKS,
    BaselineMismatch,
    ConfigInvalid,
    ExperimentConfig,
    regression_compare,
    run,
)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="layerpot",
        description="Layer potentials and fundamental solutions on the periodic grid",
    )
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--out", default=None, help="output bundle directory")
    parser.add_argument(
        "--baseline", default=None, help="baseline bundle directory to diff against"
    )
    parser.add_argument(
        "--k",
        default=None,
        help="comma-separated k ladder override for kkpt-sweep",
    )
    args = parser.parse_args(argv)

    try:
        config = ExperimentConfig.from_file(args.config)
        if config.task != args.task:
            raise ConfigInvalid(
                f"config task '{config.task}' does not match CLI task '{args.task}'"
            )
        if args.k is not None:
            if args.task != "kkpt-sweep":
                raise ConfigInvalid("--k is only valid for kkpt-sweep")
            config.kvalues = [float(k) for k in args.k.split(",")]
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    workers = os.environ.get("LAYERPOT_THREADS")
    if workers is not None:
        try:
            os.environ["LAYERPOT_THREADS"] = str(max(1, int(workers)))
        except ValueError:
            print("config error: LAYERPOT_THREADS must be an integer", file=sys.stderr)
            return 2

    bundle = run(config, out_dir=args.out)

    if args.baseline is not None:
        if args.out is None:
            print("config error: --baseline requires --out", file=sys.stderr)
            return 2
        try:
            diffs = regression_compare(args.out, args.baseline)
        except BaselineMismatch as exc:
            print(f"baseline mismatch: {exc}", file=sys.stderr)
            return 1
        print(json.dumps({"regression_diffs": diffs}, indent=2, sort_keys=True))
        if diffs:
            return 1

    for name, entry in sorted(bundle.summary["invariants"].items()):
        status = "PASS" if entry["pass"] else "FAIL"
        extra = f" value={entry['value']:.6g}" if "value" in entry else ""
        print(f"[{status}] {name}{extra}")
    return 0 if bundle.passed else 1


if __name__ == "__main__":
    sys.exit(main())
