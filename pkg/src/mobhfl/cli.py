"""Command-line entry point: ``mobhfl run|sweep|bounds|eig``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as ex
from . import mobility as mob
from .config import parse_config
from .errors import ConfigError, MobHFLError


def _parse_values(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="mobhfl",
                                     description="Mobility-aware hierarchical federated learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every seed of a config")
    run.add_argument("config")
    run.add_argument("--output-dir", help="override output_dir from the config")

    sw = sub.add_parser("sweep", help="sweep one axis and write summary.csv")
    sw.add_argument("config")
    sw.add_argument("--axis", required=True, choices=ex.SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated values, e.g. 0,1,6,15,30 or 3x10,5x6")
    sw.add_argument("--output-dir")

    b = sub.add_parser("bounds", help="re-evaluate bound reports from logged series")
    b.add_argument("directory")

    eig = sub.add_parser("eig", help="print the ring transition spectrum")
    eig.add_argument("--ring", nargs=2, metavar=("N", "P_S"), required=True)
    return parser


def _load(args):
    cfg = parse_config(args.config)
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return ex.run_experiment(_load(args))
        if args.command == "sweep":
            summary = ex.sweep(_load(args), args.axis, _parse_values(args.values))
            failed = [r["value"] for r in summary if r["status"] != ex.EXIT_OK]
            if failed:
                print(f"failed points: {', '.join(failed)}", file=sys.stderr)
            return ex.EXIT_OK
        if args.command == "bounds":
            for path in ex.reevaluate_bounds(args.directory):
                print(path)
            return ex.EXIT_OK
        try:
            params = mob.RingParams(int(args.ring[0]), float(args.ring[1]))
        except ValueError as exc:
            raise ConfigError(f"bad ring arguments: {exc}") from None
        for n, lam in enumerate(mob.eigenvalues_ring(params)):
            print(f"lambda_{n} = {float(lam)!r}")
        print(f"runner-up p_s + (1 - p_s) cos(2 pi / N) = {mob.ring_runner_up(params)!r}")
        try:
            print(f"lambda* = {mob.lambda_star(mob.ring_transition(params))!r}")
        except MobHFLError as exc:
            print(f"lambda* undefined: {exc}")
        return ex.EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    except (MobHFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ex.EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
