"""
Experiment orchestration: train or load a model for one operating point, evaluate it,
compose single-user codes by time division and run resumable parameter sweeps that
append one CSV row per point.
"""

import csv
import itertools
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from feedback_code_toolkit.channel import ChannelConfig
from feedback_code_toolkit.codes import FeedbackCode, build_code
from feedback_code_toolkit.config import ExperimentConfig, training_hash
from feedback_code_toolkit.evaluation import ResultRow, run_bler_eval
from feedback_code_toolkit.exceptions import ConfigError
from feedback_code_toolkit.train_federated import (
    FederatedTrainingState,
    federated_train,
    load_federated_state,
)
from feedback_code_toolkit.train_global import (
    MetricsRecord,
    TrainingState,
    checkpoint_load,
    checkpoint_load_optimizer,
    checkpoint_save,
    train,
)

__all__ = [
    "SweepPoint",
    "TddSlot",
    "build_model",
    "build_channel",
    "base_point",
    "experiment_id",
    "write_metrics_csv",
    "load_training_state",
    "train_model",
    "run_experiment",
    "tdd_compose",
    "run_tdd",
    "sweep_points",
    "read_result_rows",
    "sweep",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepPoint:
    """One operating point; None feedback or gradient noise means noiseless."""

    forward_snr_db: float
    feedback_noise_db: Optional[float]
    grad_snr_db: Optional[float] = None


@dataclass(frozen=True)
class TddSlot:
    """One single-user code of a time-division composite.

    Attributes:
        user: The user served in this slot.
        num_bits: K, unchanged from the broadcast setting.
        blocklength: N/L channel uses.
        rate: The user's rate, K/(N/L) = L·K/N.
    """

    user: int
    num_bits: int
    blocklength: int
    rate: float


def build_model(config: ExperimentConfig, num_users=None, blocklength=None, seed=None) -> FeedbackCode:
    code_config = config.model.code_config(num_users, blocklength)
    return build_code(config.model.family, code_config, config.seed if seed is None else seed)


def build_channel(
    config: ExperimentConfig,
    point: Optional[SweepPoint] = None,
    num_users: Optional[int] = None,
    blocklength: Optional[int] = None,
    seed: Optional[int] = None,
) -> ChannelConfig:
    point = point or base_point(config)
    return ChannelConfig.from_db(
        config.model.num_users if num_users is None else num_users,
        config.model.blocklength if blocklength is None else blocklength,
        point.forward_snr_db,
        point.feedback_noise_db,
        config.seed if seed is None else seed,
    )


def base_point(config: ExperimentConfig) -> SweepPoint:
    grad = config.federated.grad_snr_db if config.federated is not None else None
    return SweepPoint(config.channel.forward_snr_db, config.channel.feedback_noise_db, grad)


def _format_db(value: Optional[float]) -> str:
    return "noiseless" if value is None else f"{value:g}"


def experiment_id(config: ExperimentConfig, point: SweepPoint, scheme: str = "broadcast") -> str:
    parts = [
        config.name,
        scheme,
        f"snr{_format_db(point.forward_snr_db)}",
        f"fb{_format_db(point.feedback_noise_db)}",
    ]
    if config.federated is not None:
        parts.append(f"grad{_format_db(point.grad_snr_db)}")
    return "_".join(parts)


def write_metrics_csv(
    path: Union[str, os.PathLike], records: Sequence[MetricsRecord], append: bool = False
) -> None:
    """Writes one row per epoch; ``append`` extends an existing file without a header."""
    with open(path, "a" if append else "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if not append:
            writer.writerow(MetricsRecord.HEADER)
        for record in records:
            writer.writerow(record.to_csv_row())


TrainingProgress = Union[TrainingState, FederatedTrainingState]


def load_training_state(
    config: ExperimentConfig, path: Union[str, os.PathLike]
) -> tuple[FeedbackCode, TrainingProgress]:
    """Loads a checkpoint together with the training state needed to resume it.

    Raises:
        ConfigError: If the checkpoint was saved without a training state.
        CheckpointMismatchError: If the checkpoint does not fit the configured model
          or holds the state of the other training mode.
    """
    model = checkpoint_load(path, expected_config=config.model.code_config())
    if config.federated is not None:
        state = load_federated_state(path, model)
    else:
        state = checkpoint_load_optimizer(path, model)
    if state is None:
        raise ConfigError(f"{path} holds no training state to resume from")
    logger.info("resuming %r after epoch %d, batch %d", model, state.epoch, state.batches_done)
    return model, state


def train_model(
    config: ExperimentConfig,
    model: FeedbackCode,
    channel: ChannelConfig,
    run_id: str,
    grad_snr_db: Optional[float] = None,
    state: Optional[TrainingProgress] = None,
) -> list[MetricsRecord]:
    """Trains ``model`` (federated if configured) and writes metrics and a checkpoint.

    Files go to ``<output_dir>/<run_id>.metrics.csv`` and ``<output_dir>/<run_id>.npz``;
    federated runs also write ``<run_id>.transfer.csv``. The checkpoint carries the
    optimizer state, so a run given a restored ``state`` continues where it stopped
    and appends to the metrics and transfer logs.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / f"{run_id}.metrics.csv"
    resumed = state is not None and state.epoch > 0
    if config.federated is not None:
        fed = replace(config.federated_config, grad_snr_db=grad_snr_db)
        state = state if state is not None else FederatedTrainingState.start(model, fed)
        transfer_path = out / f"{run_id}.transfer.csv"
        records = federated_train(
            model, channel, fed, state, transfer_path, append=resumed and transfer_path.exists()
        )
    else:
        state = state if state is not None else TrainingState.start(model, config.train_config)
        records = train(model, channel, config.train_config, state)
    write_metrics_csv(metrics_path, records, append=resumed and metrics_path.exists())
    checkpoint_save(model, out / f"{run_id}.npz", state, experiment_hash=training_hash(config))
    return records


def _obtain_model(
    config: ExperimentConfig,
    channel: ChannelConfig,
    run_id: str,
    mode: str,
    grad_snr_db: Optional[float],
    checkpoint: Optional[Union[str, os.PathLike]] = None,
    num_users: Optional[int] = None,
    blocklength: Optional[int] = None,
    seed: Optional[int] = None,
) -> FeedbackCode:
    expected = config.model.code_config(num_users, blocklength)
    if checkpoint is not None:
        return checkpoint_load(checkpoint, expected_config=expected)
    if mode == "evaluate":
        path = Path(config.output_dir) / f"{run_id}.npz"
        return checkpoint_load(
            path, expected_config=expected, expected_experiment_hash=training_hash(config)
        )
    model = build_model(config, num_users, blocklength, seed)
    train_model(config, model, channel, run_id, grad_snr_db)
    return model


def run_experiment(
    config: ExperimentConfig,
    point: Optional[SweepPoint] = None,
    mode: str = "train",
    checkpoint: Optional[Union[str, os.PathLike]] = None,
) -> ResultRow:
    """Trains (or loads) the broadcast code for one operating point and evaluates it."""
    point = point or base_point(config)
    if point.grad_snr_db is not None and config.federated is None:
        raise ConfigError("a gradient-link SNR needs a federated section")
    run_id = experiment_id(config, point)
    channel = build_channel(config, point)
    model = _obtain_model(config, channel, run_id, mode, point.grad_snr_db, checkpoint)
    evaluation = config.evaluation
    return run_bler_eval(
        model,
        channel,
        evaluation.max_samples,
        evaluation.target_errors,
        evaluation.batch_size,
        experiment_id=run_id,
        grad_snr_db=point.grad_snr_db,
    )


def tdd_compose(num_bits: int, blocklength: int, num_users: int) -> list[TddSlot]:
    """Splits a block of N uses into L single-user slots of N/L uses.

    Raises:
        ConfigError: If N is not divisible by L.
    """
    if num_users < 1 or blocklength % num_users:
        raise ConfigError(f"time division needs N divisible by L, got N={blocklength}, L={num_users}")
    slot_length = blocklength // num_users
    return [
        TddSlot(user, num_bits, slot_length, num_bits / slot_length) for user in range(num_users)
    ]


def _slot_seed(seed: int, user: int) -> int:
    return int(np.random.SeedSequence([seed, user]).generate_state(1)[0])


def run_tdd(
    config: ExperimentConfig, point: Optional[SweepPoint] = None, mode: str = "train"
) -> ResultRow:
    """Serves every user with its own single-user code and combines the results.

    The row keeps the broadcast bookkeeping (L, K and the full N); its sample count is
    the smallest over the slots.
    """
    point = point or base_point(config)
    model_settings = config.model
    run_id = experiment_id(config, point, "tdd")
    samples, errors = [], []
    for slot in tdd_compose(model_settings.num_bits, model_settings.blocklength, model_settings.num_users):
        seed = _slot_seed(config.seed, slot.user)
        channel = build_channel(config, point, num_users=1, blocklength=slot.blocklength, seed=seed)
        slot_id = f"{run_id}_user{slot.user}"
        model = _obtain_model(
            config, channel, slot_id, mode, point.grad_snr_db, None, 1, slot.blocklength, seed
        )
        evaluation = config.evaluation
        row = run_bler_eval(
            model,
            channel,
            evaluation.max_samples,
            evaluation.target_errors,
            evaluation.batch_size,
            experiment_id=slot_id,
        )
        samples.append(row.samples)
        errors.append(row.block_errors[0])
    return ResultRow.from_counts(
        run_id,
        "tdd",
        model_settings.family,
        model_settings.num_users,
        model_settings.num_bits,
        model_settings.blocklength,
        build_channel(config, point),
        samples,
        errors,
        point.grad_snr_db,
    )


def sweep_points(config: ExperimentConfig) -> list[SweepPoint]:
    """The Cartesian product of the sweep axes: feedback noise, forward SNR, gradient SNR."""
    grid = config.sweep
    base = base_point(config)
    if grid is None:
        return [base]
    feedback = grid.feedback_noise_db if grid.feedback_noise_db is not None else (base.feedback_noise_db,)
    forward = grid.forward_snr_db if grid.forward_snr_db is not None else (base.forward_snr_db,)
    grad = grid.grad_snr_db if grid.grad_snr_db is not None else (base.grad_snr_db,)
    if config.federated is None and any(g is not None for g in grad):
        raise ConfigError("sweeping the gradient-link SNR needs a federated section")
    return [SweepPoint(s, f, g) for f, s, g in itertools.product(feedback, forward, grad)]


def read_result_rows(path: Union[str, os.PathLike]) -> list[ResultRow]:
    """Reads the rows of a results CSV; a missing file has no rows."""
    if not os.path.exists(path):
        return []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != ResultRow.HEADER:
            raise ConfigError(f"{path} does not have the results header")
        return [ResultRow.from_csv_row(row) for row in reader if row]


Runner = Callable[[ExperimentConfig, SweepPoint, str], ResultRow]


def sweep(
    config: ExperimentConfig,
    csv_path: Union[str, os.PathLike],
    runner: Optional[Runner] = None,
) -> list[ResultRow]:
    """Runs every point of the sweep grid, appending one row per point to ``csv_path``.

    Points whose experiment id already appears in the file are skipped, so an
    interrupted sweep resumes where it stopped. Each row is flushed as soon as it is
    computed.
    """
    grid = config.sweep
    scheme = grid.scheme if grid is not None else "broadcast"
    mode = grid.mode if grid is not None else "train"
    if runner is None:
        runner = run_tdd if scheme == "tdd" else run_experiment
    points = sweep_points(config)
    existing = {row.experiment_id: row for row in read_result_rows(csv_path)}
    rows = []
    write_header = not existing and not (os.path.exists(csv_path) and os.path.getsize(csv_path) > 0)
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "a", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if write_header:
            writer.writerow(ResultRow.HEADER)
            handle.flush()
        for index, point in enumerate(points):
            run_id = experiment_id(config, point, scheme)
            if run_id in existing:
                logger.warning("skipping %s: already in %s", run_id, csv_path)
                rows.append(existing[run_id])
                continue
            logger.info("sweep point %d/%d: %s", index + 1, len(points), run_id)
            row = runner(config, point, mode)
            writer.writerow(row.to_csv_row())
            handle.flush()
            rows.append(row)
    return rows
