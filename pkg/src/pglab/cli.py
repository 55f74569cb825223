"""Command line: ``pglab run|report|plot|selftest``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness.config import OUTPUT_ROOT_ENV, ConfigError, load_config, resolve_output_dir
from .harness.plot import plot_curves
from .harness.report import generate_report
from .harness.runner import run_experiment
from .harness.selftest import run_selftest


def parse_seed_list(raw: str) -> list[int]:
    seeds = [int(s) for s in raw.replace(";", ",").split(",") if s.strip()]
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pglab", description="PPO / GRPO / Hybrid GRPO comparison harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (algorithm x seed) cell of a config")
    run.add_argument("config")
    run.add_argument("--seeds", type=parse_seed_list, help="comma-separated seeds overriding the config")
    run.add_argument("--out", help=f"output directory (default: config output_dir under ${OUTPUT_ROOT_ENV})")
    run.add_argument("--parallel", type=int, default=1, metavar="K", help="cells to run concurrently")

    rep = sub.add_parser("report", help="aggregate metrics in an output directory")
    rep.add_argument("dir")

    plot = sub.add_parser("plot", help="write learning-curve SVGs from metrics.csv")
    plot.add_argument("dir")

    sub.add_parser("selftest", help="run the quick invariant suite")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        try:
            config = load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if args.seeds:
            config.seeds = args.seeds
        out = resolve_output_dir(config, args.out)
        code = run_experiment(config, out, parallel=max(1, args.parallel))
        print((out / "report.txt").read_text(), end="")
        return code

    if args.command == "report":
        if not (Path(args.dir) / "experiment.json").exists():
            print(f"error: {args.dir} holds no experiment.json", file=sys.stderr)
            return 2
        _, text = generate_report(args.dir)
        print(text, end="")
        return 0

    if args.command == "plot":
        for path in plot_curves(args.dir):
            print(path)
        return 0

    return run_selftest()


if __name__ == "__main__":
    sys.exit(main())
