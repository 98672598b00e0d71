"""Command-line experiment runner.

Exit codes: 0 success, 2 configuration error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import glob
import json
import sys
from pathlib import Path

from .engine import SimulationError
from .experiment import (ConfigError, compare_dirs, load_config, run_experiment)


def _cmd_run(args) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    result = run_experiment(config, seed=seed, out_dir=args.out)
    summary = result.summary
    print(f"completed {summary['completed']}/{summary['n_requests']} requests "
          f"(seed {seed})")
    print(f"  avg TTFT {summary['ttft']['avg_us'] / 1e3:.1f} ms   "
          f"avg JCT {summary['jct']['avg_us'] / 1e3:.1f} ms   "
          f"resource {summary['resource_usage_us'] / 1e6:.3f} s")
    print(f"  outputs in {args.out}")
    return 0


def _cmd_compare(args) -> int:
    report = compare_dirs(args.a, args.b)
    print(json.dumps(report, indent=2, sort_keys=True))
    out = Path(args.a) / "compare.json"
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_sweep(args) -> int:
    paths = sorted(glob.glob(args.configs))
    if not paths:
        raise ConfigError(f"sweep: no configs match {args.configs!r}")
    base = Path(args.out)
    for path in paths:
        config = load_config(path)
        out_dir = base / Path(path).stem
        result = run_experiment(config, out_dir=out_dir)
        print(f"{path}: avg JCT {result.summary['jct']['avg_us'] / 1e3:.1f} ms "
              f"-> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdsim",
        description="Discrete-event simulator for disaggregated LLM inference serving")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True, help="experiment config (JSON)")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="compare two runs (b is the baseline)")
    cmp_.add_argument("--a", required=True, help="candidate run directory")
    cmp_.add_argument("--b", required=True, help="baseline run directory")
    cmp_.add_argument("--out", default=None, help="write the report JSON here")
    cmp_.set_defaults(func=_cmd_compare)

    sweep = sub.add_parser("sweep", help="run every config matching a glob")
    sweep.add_argument("--configs", required=True, help="glob of config files")
    sweep.add_argument("--out", required=True, help="base output directory")
    sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
