"""Command-line entry point: ``fklvi <experiment> --config <path> [--seed N] [--out DIR] [--replicates N]``."""

import argparse
import logging
import sys
from pathlib import Path

from fklvi import experiments
from fklvi.config import EXPERIMENTS, ConfigError, ExperimentConfig

RUNNERS = {
    "toy-width-sweep": experiments.run_toy_width_sweep,
    "clustering": experiments.run_clustering,
    "ntk-diagnostics": experiments.run_ntk_diagnostics,
    "kgf-compare": experiments.run_kgf_compare,
    "estimator-audit": experiments.run_estimator_audit,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fklvi", description="Run a desk-scale experiment.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", type=Path, help="YAML file overriding the experiment defaults")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", type=Path, help="output directory (default: <output_dir>/<experiment>)")
    parser.add_argument("--replicates", type=int, help="number of replicates")
    parser.add_argument("--workers", type=int, help="worker processes for replicate-level jobs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        config = ExperimentConfig.load(args.config)
        if config.experiment != args.experiment:
            raise ConfigError(f"config file is for '{config.experiment}', not '{args.experiment}'")
    else:
        config = ExperimentConfig.default(args.experiment)
    return config.override(seed=args.seed, replicates=args.replicates, workers=args.workers)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except (ConfigError, OSError) as err:
        print(f"fklvi: configuration error: {err}", file=sys.stderr)
        return 2
    out = args.out if args.out is not None else Path(config["output_dir"]) / config.experiment
    RUNNERS[config.experiment](config, out)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
