"""``hybridckf`` command line: simulate, train, evaluate, sweep, plot.

Exit status: 0 on success, 1 on configuration or missing-input errors,
2 when runs fail (a Monte Carlo cell above the failure threshold, or a
divergent single run).
"""

import argparse
import logging
import sys
from pathlib import Path

import yaml

from hybridckf import experiment
from hybridckf.config import ExperimentConfig
from hybridckf.errors import ConfigError, HybridCKFError, MissingArtifact
from hybridckf.plots import emit_plots

logger = logging.getLogger("hybridckf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNS = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="hybridckf", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file (defaults apply to missing keys)")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key, e.g. filter.q_s=1e-3 (repeatable)",
    )  # fmt: skip
    common.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
    common.add_argument("--jobs", type=int, help="worker processes (default: available CPUs)")
    common.add_argument("--out", type=Path, help="artifact directory (default: output_dir)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write train/test datasets for each SNR level")
    sub.add_parser("train", parents=[common], help="one run per (SNR, method) with weights and traces")
    sub.add_parser("evaluate", parents=[common], help="re-score stored weights on regenerated test data")
    sub.add_parser("sweep", parents=[common], help="Monte Carlo over SNR levels and methods")
    sub.add_parser("plot", parents=[common], help="SVG figures from an artifact directory")
    return parser


def _resolve_config(args, stored=None):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append({"master_seed": args.seed})
    if args.config is None and stored is not None:
        tree = yaml.safe_load(stored.read_text(encoding="utf-8"))
        tree.pop("config_version", None)
        return ExperimentConfig.load(overrides=[tree, *overrides])
    if args.config is not None and not args.config.is_file():
        raise ConfigError("--config", f"no such file {args.config}")
    return ExperimentConfig.load(args.config, overrides)


def _dispatch(args):
    if args.command in ("evaluate", "plot"):
        if args.out is None:
            raise ConfigError("--out", f"{args.command} needs the artifact directory")
        stored = args.out / "config.yaml"
        if not stored.is_file():
            raise MissingArtifact(f"no config.yaml in {args.out}")
        if args.command == "plot":
            for path in emit_plots(args.out):
                print(path)
            return EXIT_OK
        cfg = _resolve_config(args, stored)
        rows = experiment.evaluate_tree(cfg, args.out)
        print(f"evaluated {len(rows)} runs into {args.out / 'evaluation.csv'}")
        return EXIT_OK

    cfg = _resolve_config(args)
    out = args.out if args.out is not None else Path(cfg["output_dir"])
    if args.command == "simulate":
        experiment.simulate(cfg, out)
    elif args.command == "train":
        experiment.run_single(cfg, out)
    else:
        jobs = args.jobs if args.jobs is not None else experiment.default_jobs()
        if jobs < 1:
            raise ConfigError("--jobs", "must be at least 1")
        failed = experiment.run_sweep(cfg, out, jobs=jobs)
        if failed:
            cells = ", ".join(f"{m}@{experiment.snr_tag(s)}" for m, s in failed)
            print(f"error: too many failed runs in {cells}", file=sys.stderr)
            return EXIT_RUNS
    print(f"wrote {out}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HybridCKFError as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNS


if __name__ == "__main__":
    sys.exit(main())
