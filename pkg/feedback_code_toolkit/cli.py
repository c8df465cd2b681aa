"""
Command line interface.

    feedback-code train    --config exp.json [--seed S] [--out DIR] [--resume model.npz]
    feedback-code fedtrain --config exp.json [--seed S] [--out DIR] [--resume model.npz]
    feedback-code eval     --config exp.json --checkpoint model.npz [--csv results.csv]
    feedback-code sweep    --config exp.json [--csv results.csv]
    feedback-code baseline --config exp.json [--csv baseline.csv]

Exit codes: 0 on success, 2 for configuration errors, 3 for numerical aborts.
"""

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from feedback_code_toolkit import baselines, experiments
from feedback_code_toolkit.config import ExperimentConfig, load_config, with_overrides
from feedback_code_toolkit.evaluation import ResultRow
from feedback_code_toolkit.exceptions import ConfigError, NumericalAbortError

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feedback-code",
        description="Train and evaluate learned feedback codes over the AWGN broadcast channel.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="experiment JSON file")
        sub.add_argument("--seed", type=int, help="override the experiment seed")
        sub.add_argument("--out", help="override the output directory")
        return sub

    for name, help_text in (
        ("train", "train the broadcast code at the base operating point"),
        ("fedtrain", "train with the federated protocol"),
    ):
        command(name, help_text).add_argument(
            "--resume", help="continue training from a checkpoint saved with its training state"
        )
    evaluate = command("eval", "evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--max-samples", type=int)
    evaluate.add_argument("--target-errors", type=int)
    evaluate.add_argument("--csv", help="append the result row to this CSV")
    run_sweep = command("sweep", "run every point of the sweep grid")
    run_sweep.add_argument("--max-samples", type=int)
    run_sweep.add_argument("--target-errors", type=int)
    run_sweep.add_argument("--csv", help="results CSV (default <out>/<name>.csv)")
    baseline = command("baseline", "PAM repetition baseline over the forward SNR grid")
    baseline.add_argument("--max-samples", type=int, help="Monte Carlo samples per point")
    baseline.add_argument("--csv", help="baseline CSV (default <out>/<name>.baseline.csv)")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load(args: argparse.Namespace) -> ExperimentConfig:
    return with_overrides(
        load_config(args.config),
        seed=args.seed,
        output_dir=args.out,
        max_samples=getattr(args, "max_samples", None),
        target_errors=getattr(args, "target_errors", None),
    )


def _append_row(path: str, row: ResultRow) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if new:
            writer.writerow(ResultRow.HEADER)
        writer.writerow(row.to_csv_row())


def _train(config: ExperimentConfig, federated: bool, resume: Optional[str] = None) -> None:
    if federated and config.federated is None:
        raise ConfigError("fedtrain needs a 'federated' section in the config")
    if not federated:
        config = replace(config, federated=None)
    point = experiments.base_point(config)
    run_id = experiments.experiment_id(config, point)
    state = None
    if resume is not None:
        model, state = experiments.load_training_state(config, resume)
    else:
        model = experiments.build_model(config)
    channel = experiments.build_channel(config, point)
    experiments.train_model(config, model, channel, run_id, point.grad_snr_db, state)
    print(Path(config.output_dir) / f"{run_id}.npz")


def _evaluate(config: ExperimentConfig, args: argparse.Namespace) -> None:
    row = experiments.run_experiment(config, mode="evaluate", checkpoint=args.checkpoint)
    if args.csv:
        _append_row(args.csv, row)
    print(",".join(row.to_csv_row()))


def _sweep(config: ExperimentConfig, args: argparse.Namespace) -> None:
    path = args.csv or Path(config.output_dir) / f"{config.name}.csv"
    rows = experiments.sweep(config, path)
    logger.info("%d rows in %s", len(rows), path)


def _baseline(config: ExperimentConfig, args: argparse.Namespace) -> None:
    model = config.model
    n_uses = model.blocklength // model.num_users
    snrs = [point.forward_snr_db for point in experiments.sweep_points(config)]
    snrs = list(dict.fromkeys(snrs))
    samples = args.max_samples or 1_000_000
    points = baselines.baseline_sweep(model.num_bits, n_uses, snrs, samples, config.seed)
    path = args.csv or Path(config.output_dir) / f"{config.name}.baseline.csv"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    baselines.write_baseline_csv(path, points)
    print(path)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        config = _load(args)
        if args.command in ("train", "fedtrain"):
            _train(config, args.command == "fedtrain", args.resume)
        elif args.command == "eval":
            _evaluate(config, args)
        elif args.command == "sweep":
            _sweep(config, args)
        elif args.command == "baseline":
            _baseline(config, args)
    except ConfigError as error:
        logger.error("configuration error: %s", error)
        return EXIT_CONFIG
    except NumericalAbortError as error:
        logger.error("numerical abort: %s", error)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
