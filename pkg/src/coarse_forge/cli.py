"""Command-line entry point: ``coarse-forge run`` and ``coarse-forge plot``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .effective import EstimationError
from .models import ModelError
from .sampling import DivergenceError

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def _parser():
    p = argparse.ArgumentParser(prog="coarse-forge", description="Effective-dynamics experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a key = value config file")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config's output key)")
    r.add_argument("--seed", type=int, help="override the config's seed")
    r.add_argument("--quiet", action="store_true", help="suppress the summary table")
    pl = sub.add_parser("plot", help="render PNG figures from an experiment's CSV outputs")
    pl.add_argument("directory")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "plot":
        from .plotting import plot_directory

        written = plot_directory(args.directory)
        for path in written:
            print(path)
        return EXIT_PASS

    from .experiments import run

    try:
        cfg = load_config(args.config, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run(cfg, args.out)
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ModelError, EstimationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        print(result.to_text())
    return EXIT_PASS if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
