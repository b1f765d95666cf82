"""Command line entry point: ``clusterfl run`` and ``clusterfl sweep``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DataError, NumericError, StructuralError
from .harness import NOT_REACHED, ExperimentConfig, run_experiment, sweep

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad lambda list {text!r}") from exc


def parse_seeds(text: str) -> list[int]:
    """``1..10`` (inclusive) or a comma list such as ``1,4,9``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise ConfigError(f"empty seed list {text!r}")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write per-round metrics")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="output directory")

    sw = sub.add_parser("sweep", help="run a lambda x seed grid")
    sw.add_argument("--config", required=True)
    sw.add_argument("--lambdas", default="0,0.1,0.2,0.5")
    sw.add_argument("--seeds", default="1..10")
    sw.add_argument("--out", required=True, help="output directory")

    sub.add_parser("defaults", help="print the default config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "defaults":
            sys.stdout.write(ExperimentConfig().to_text())
            return EXIT_OK
        cfg = ExperimentConfig.load(args.config)
        if args.command == "run":
            result = run_experiment(cfg, out_dir=args.out)
            last = result.records[-1] if result.records else None
            reached = result.rounds_to_purity()
            print(f"rounds={len(result.records)} final_purity={last.purity if last else ''} "
                  f"final_acc={last.accuracy if last else ''} "
                  f"rounds_to_purity_0.9={NOT_REACHED if reached is None else reached}")
        else:
            _, summaries = sweep(cfg, parse_floats(args.lambdas), parse_seeds(args.seeds), out_dir=args.out)
            for s in summaries:
                med = NOT_REACHED if s.median_rounds_to_target is None else s.median_rounds_to_target
                print(f"lambda={s.lam} median_rounds_to_purity_0.9={med} median_final_acc={s.median_final_accuracy}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StructuralError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
