"""
Joint training of an encoder and all of its decoders against the global loss.

One batch: draw messages for every user, roll the episode through the channel, decode
every user, average the per-user cross-entropies, backpropagate, clip the global
gradient norm and take an adaptive-moment step. Each epoch takes its learning rate
from the configured scheduler. After the epoch the running power statistics are
re-estimated with the parameters held fixed and the transmit power of the deployed,
inference-mode encoder is audited.

Checkpoints are ``.npz`` archives holding a JSON ``meta`` record plus little-endian
float64 arrays named ``param::<name>``, ``power::<key>``, ``opt_m::<name>`` and
``opt_v::<name>``; federated checkpoints add the moments of every party and the
encoder-side decoder replicas.
"""

import enum
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Optional, Protocol, Sequence, Union

import numpy as np

from feedback_code_toolkit.autodiff import (
    ParameterStore,
    Tape,
    Tensor,
    add_n,
    backward,
    cross_entropy_op,
    scale,
)
from feedback_code_toolkit.channel import (
    ChannelConfig,
    Link,
    Stream,
    draw_episode_noise,
    measure_power,
    substream,
)
from feedback_code_toolkit.codes import (
    CODE_FAMILIES,
    Episode,
    FeedbackCode,
    MessageBlock,
    build_code,
    decode_hard,
    run_episode,
)
from feedback_code_toolkit.exceptions import (
    CheckpointMismatchError,
    ConfigError,
    ContractError,
    NumericalAbortError,
)
__all__ = [
    "OptimizerKind",
    "SchedulerKind",
    "TrainConfig",
    "OptimizerState",
    "pack_optimizer_state",
    "unpack_optimizer_state",
    "ResumableState",
    "MetricsRecord",
    "TrainingState",
    "BatchResult",
    "POWER_TOLERANCE",
    "CHECKPOINT_FORMAT_VERSION",
    "LIGHT_DESK_LR_TABLE",
    "table_defaults",
    "desk_defaults",
    "default_lr_table",
    "canonical_hash",
    "sample_messages",
    "global_loss",
    "clip_gradients",
    "optimizer_step",
    "scheduler_step",
    "rollout_batch",
    "block_errors",
    "check_finite",
    "train_batch",
    "calibrate_statistics",
    "power_audit",
    "audit_epoch",
    "train_epoch",
    "train",
    "checkpoint_save",
    "checkpoint_load",
    "checkpoint_load_optimizer",
    "read_training_record",
]

logger = logging.getLogger(__name__)

POWER_TOLERANCE = 0.02
CHECKPOINT_FORMAT_VERSION = 1
LIGHT_DESK_LR_TABLE = (1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.1, 0.1)


class OptimizerKind(str, enum.Enum):
    ADAM = "adam"
    ADAMW = "adamw"


class SchedulerKind(str, enum.Enum):
    STEP_DECAY = "step_decay"
    MULTIPLICATIVE_TABLE = "multiplicative_table"


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    Attributes:
        batch_size: Samples per batch.
        epochs: Number of epochs E.
        total_samples: Training samples over all epochs; each epoch runs
          ``total_samples // (epochs·batch_size)`` batches (at least one).
        learning_rate: Initial learning rate.
        optimizer: Adaptive moments, optionally with decoupled weight decay.
        weight_decay: Decay rate of the decoupled variant.
        scheduler: Step decay or a per-epoch multiplicative table.
        step_period: Epochs per step-decay plateau.
        step_factor: Multiplier per step-decay plateau.
        lr_table: Optional multiplicative table indexed by epoch; defaults to
          default_lr_table(epochs).
        clip_threshold: Global gradient norm bound.
        seed: Seed of the message substreams.
        audit_batch: Batch size of the calibration and power audit run after every epoch.
        calibration_batches: Batches of ``audit_batch`` samples over which the running
          power statistics are re-estimated before each audit.
    """

    batch_size: int = 500
    epochs: int = 10
    total_samples: int = 50_000
    learning_rate: float = 1e-3
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    weight_decay: float = 0.01
    scheduler: SchedulerKind = SchedulerKind.MULTIPLICATIVE_TABLE
    step_period: int = 10
    step_factor: float = 0.7
    lr_table: Optional[tuple[float, ...]] = None
    clip_threshold: float = 0.5
    seed: int = 0
    audit_batch: int = 10_000
    calibration_batches: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        object.__setattr__(self, "scheduler", SchedulerKind(self.scheduler))
        if self.lr_table is not None:
            object.__setattr__(self, "lr_table", tuple(float(f) for f in self.lr_table))
        for name in (
            "batch_size",
            "epochs",
            "total_samples",
            "step_period",
            "audit_batch",
            "calibration_batches",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for batch normalization")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be nonnegative")
        if self.clip_threshold <= 0:
            raise ConfigError(f"clip_threshold must be positive, got {self.clip_threshold}")
        if not 0 < self.step_factor <= 1:
            raise ConfigError(f"step_factor must lie in (0, 1], got {self.step_factor}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.opt_eps > 0):
            raise ConfigError("invalid optimizer betas or epsilon")
        if self.lr_table is not None and len(self.lr_table) < self.epochs:
            raise ConfigError(
                f"learning-rate table has {len(self.lr_table)} entries for {self.epochs} epochs"
            )

    @property
    def batches_per_epoch(self) -> int:
        return max(1, self.total_samples // (self.epochs * self.batch_size))

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["optimizer"] = self.optimizer.value
        out["scheduler"] = self.scheduler.value
        if self.lr_table is not None:
            out["lr_table"] = list(self.lr_table)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as error:
            if isinstance(error, ConfigError):
                raise
            raise ConfigError(f"invalid training settings: {error}") from error


def default_lr_table(epochs: int) -> tuple[float, ...]:
    """Factor 1 for the first two thirds of the epochs, then a linear decay."""
    start = math.ceil(2 * epochs / 3)
    return tuple(
        1.0 if e < start else (epochs + 1 - e) / (epochs + 1 - start) for e in range(epochs + 1)
    )


def table_defaults(family: str) -> TrainConfig:
    """The full-scale training parameters of each family."""
    if family == "light_bc":
        return TrainConfig(
            batch_size=100_000,
            epochs=120,
            total_samples=100_000_000,
            learning_rate=1e-3,
            optimizer=OptimizerKind.ADAMW,
            weight_decay=0.01,
            scheduler=SchedulerKind.MULTIPLICATIVE_TABLE,
            clip_threshold=0.5,
            audit_batch=100_000,
        )
    if family == "rpc_bc":
        return TrainConfig(
            batch_size=100_000,
            epochs=100,
            total_samples=10_000_000,
            learning_rate=1e-2,
            optimizer=OptimizerKind.ADAM,
            weight_decay=0.0,
            scheduler=SchedulerKind.STEP_DECAY,
            clip_threshold=1.0,
            audit_batch=100_000,
        )
    raise ConfigError(f"unknown model family {family!r}")


def desk_defaults(family: str) -> TrainConfig:
    """Desk-scale versions of table_defaults: 50k training samples over 10 epochs.

    LightBC takes 500 small steps at a higher rate with a stepped decay table; RPC-BC
    keeps batches of 500 with a faster step decay.
    """
    desk = dict(epochs=10, total_samples=50_000, audit_batch=10_000)
    if family == "light_bc":
        return replace(
            table_defaults(family),
            batch_size=100,
            learning_rate=1e-2,
            lr_table=LIGHT_DESK_LR_TABLE,
            **desk,
        )
    return replace(table_defaults(family), batch_size=500, step_period=4, **desk)


def canonical_hash(data: dict[str, Any]) -> str:
    """SHA-256 of the sorted-key compact JSON form of ``data``."""
    text = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class OptimizerState:
    """First and second moment accumulators of an adaptive-moment optimizer.

    Attributes:
        m: First moments by parameter name.
        v: Second moments by parameter name.
        step: Number of updates applied so far.
    """

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    kind: OptimizerKind = OptimizerKind.ADAM
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def create(
        cls,
        params: Union[ParameterStore, dict[str, np.ndarray]],
        config: TrainConfig,
        names: Optional[Sequence[str]] = None,
    ) -> "OptimizerState":
        names = list(params) if names is None else list(names)
        shapes = {name: _values(params, name).shape for name in names}
        return cls(
            m={name: np.zeros(shape) for name, shape in shapes.items()},
            v={name: np.zeros(shape) for name, shape in shapes.items()},
            kind=config.optimizer,
            weight_decay=config.weight_decay if config.optimizer is OptimizerKind.ADAMW else 0.0,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.opt_eps,
        )


def pack_optimizer_state(
    opt: OptimizerState, prefix: str
) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Splits an optimizer state into a JSON record and ``<prefix>_m::``/``<prefix>_v::`` arrays."""
    record = {
        "kind": opt.kind.value,
        "weight_decay": opt.weight_decay,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "step": opt.step,
        "names": list(opt.m),
    }
    arrays = {f"{prefix}_m::{name}": m for name, m in opt.m.items()}
    arrays.update({f"{prefix}_v::{name}": v for name, v in opt.v.items()})
    return record, arrays


def unpack_optimizer_state(
    record: dict[str, Any], arrays: dict[str, np.ndarray], prefix: str, names: Sequence[str]
) -> OptimizerState:
    """Inverse of pack_optimizer_state for the parameters ``names``.

    Raises:
        CheckpointMismatchError: If the stored moments cover other parameters.
    """
    stored = record.get("names")
    if stored is not None and sorted(stored) != sorted(names):
        raise CheckpointMismatchError(
            f"optimizer state {prefix!r} covers {sorted(stored)}, expected {sorted(names)}"
        )
    try:
        m = {name: np.array(arrays[f"{prefix}_m::{name}"], dtype=np.float64) for name in names}
        v = {name: np.array(arrays[f"{prefix}_v::{name}"], dtype=np.float64) for name in names}
    except KeyError as error:
        raise CheckpointMismatchError(f"optimizer state lacks {error}") from None
    return OptimizerState(
        m,
        v,
        kind=OptimizerKind(record["kind"]),
        weight_decay=record["weight_decay"],
        beta1=record["beta1"],
        beta2=record["beta2"],
        eps=record["eps"],
        step=record["step"],
    )


class ResumableState(Protocol):
    """A training state that a checkpoint can carry."""

    epoch: int
    batches_done: int

    def checkpoint_record(self) -> tuple[dict[str, Any], dict[str, np.ndarray]]: ...


@dataclass(frozen=True)
class MetricsRecord:
    """Summary of one training epoch.

    Attributes:
        epoch: 1-based index of the finished epoch.
        loss: Mean global loss over the epoch's batches.
        bler: Per-user empirical block error rate over the epoch's training batches.
        power: Mean Σ_t x² of the power audit.
        learning_rate: Learning rate used during the epoch.
    """

    epoch: int
    loss: float
    bler: tuple[float, ...]
    power: float
    learning_rate: float

    HEADER = ("epoch", "loss", "bler", "power", "learning_rate")

    def __post_init__(self):
        if self.loss < 0:
            raise ContractError(f"loss must be nonnegative, got {self.loss}")

    def to_csv_row(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.loss),
            ";".join(repr(b) for b in self.bler),
            repr(self.power),
            repr(self.learning_rate),
        ]


@dataclass
class TrainingState:
    optimizer: OptimizerState
    learning_rate: float
    epoch: int = 0
    batches_done: int = 0
    history: list[MetricsRecord] = field(default_factory=list)

    @classmethod
    def start(cls, model: FeedbackCode, config: TrainConfig) -> "TrainingState":
        return cls(OptimizerState.create(model.store, config), scheduler_step(config, 0))

    def checkpoint_record(self) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
        record, arrays = pack_optimizer_state(self.optimizer, "opt")
        return {
            "kind": "global",
            "epoch": self.epoch,
            "batches_done": self.batches_done,
            "learning_rate": self.learning_rate,
            "optimizer": record,
        }, arrays


@dataclass(frozen=True)
class BatchResult:
    loss: float
    errors: tuple[int, ...]
    grad_norm: float


def _values(params: Union[ParameterStore, dict[str, np.ndarray]], name: str) -> np.ndarray:
    if isinstance(params, ParameterStore):
        return params[name].values
    return params[name]


def sample_messages(
    num_users: int, num_bits: int, batch_size: int, rng: np.random.Generator
) -> MessageBlock:
    """Draws i.i.d. uniform message indices for every user and sample."""
    return MessageBlock(rng.integers(0, 2**num_bits, size=(num_users, batch_size)), num_bits)


def global_loss(probs: Sequence[Tensor], targets: np.ndarray) -> Tensor:
    """Average over users of the mean cross-entropy of each user's decoder output.

    Args:
        probs: Per-user ``[B × 2^K]`` distributions.
        targets: ``[L × B]`` true message indices.
    """
    losses = [cross_entropy_op(p, target) for p, target in zip(probs, targets)]
    return scale(add_n(losses), 1.0 / len(losses))


def clip_gradients(
    store: ParameterStore, threshold: float, names: Optional[Sequence[str]] = None
) -> ParameterStore:
    """Rescales all gradients when their global L2 norm exceeds ``threshold``."""
    names = list(store) if names is None else names
    norm = store.global_grad_norm(names)
    if norm > threshold:
        factor = threshold / norm
        for name in names:
            store.grad(name)[...] *= factor
    return store


def optimizer_step(
    params: Union[ParameterStore, dict[str, np.ndarray]],
    opt_state: OptimizerState,
    lr: float,
    gradients: Optional[dict[str, np.ndarray]] = None,
) -> None:
    """Applies one bias-corrected adaptive-moment update in place.

    Args:
        params: A store, or a plain name→array mapping (updated in place).
        opt_state: Moments covering exactly the names to update.
        lr: Learning rate.
        gradients: Gradients by name; taken from the store's gradient slots if omitted.
    """
    if gradients is None:
        if not isinstance(params, ParameterStore):
            raise ContractError("gradients are required when params is not a ParameterStore")
        gradients = {name: params.grad(name) for name in opt_state.m}
    opt_state.step += 1
    b1, b2 = opt_state.beta1, opt_state.beta2
    correction1 = 1.0 - b1**opt_state.step
    correction2 = 1.0 - b2**opt_state.step
    for name, m in opt_state.m.items():
        theta = _values(params, name)
        grad = gradients[name]
        v = opt_state.v[name]
        if opt_state.weight_decay:
            theta *= 1.0 - lr * opt_state.weight_decay
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        theta -= lr * (m / correction1) / (np.sqrt(v / correction2) + opt_state.eps)


def scheduler_step(config: TrainConfig, epoch: int) -> float:
    """Learning rate for the 0-based ``epoch``.

    Raises:
        ConfigError: If a multiplicative table has no entry for ``epoch``.
    """
    if epoch < 0:
        raise ContractError(f"epoch must be nonnegative, got {epoch}")
    if config.scheduler is SchedulerKind.STEP_DECAY:
        return config.learning_rate * config.step_factor ** (epoch // config.step_period)
    table = config.lr_table if config.lr_table is not None else default_lr_table(config.epochs)
    if epoch >= len(table):
        raise ConfigError(f"learning-rate table has no entry for epoch {epoch}")
    return config.learning_rate * table[epoch]


def rollout_batch(
    model: FeedbackCode,
    channel: ChannelConfig,
    messages: MessageBlock,
    batch_index: int,
    stream: Stream = Stream.TRAINING,
    decode: bool = True,
) -> Episode:
    noise = draw_episode_noise(channel, batch_index, messages.batch_size, stream)
    return run_episode(model, messages, noise, decode=decode)


def block_errors(probs: Sequence[Tensor], targets: np.ndarray) -> tuple[int, ...]:
    return tuple(int(np.sum(decode_hard(p) != target)) for p, target in zip(probs, targets))


def check_finite(tape: Tape, loss: Tensor, batch_index: int) -> None:
    """Raises NumericalAbortError naming the first non-finite node on the tape."""
    if not math.isfinite(loss.item()):
        raise NumericalAbortError(
            f"non-finite loss at batch {batch_index}; first non-finite node: "
            f"{tape.first_non_finite() or 'the loss'}"
        )


def train_batch(
    model: FeedbackCode,
    channel: ChannelConfig,
    config: TrainConfig,
    opt_state: OptimizerState,
    lr: float,
    batch_index: int,
) -> BatchResult:
    """Runs one forward pass, backward pass, clip and optimizer update."""
    rng = substream(config.seed, Stream.TRAINING, batch_index, Link.MESSAGES)
    messages = sample_messages(model.num_users, model.config.num_bits, config.batch_size, rng)
    model.store.zero_grad()
    with Tape() as tape:
        episode = rollout_batch(model, channel, messages, batch_index)
        loss = global_loss(episode.probs, messages.indices)
    check_finite(tape, loss, batch_index)
    backward(tape, loss, model.store)
    norm = model.store.global_grad_norm()
    if not math.isfinite(norm):
        raise NumericalAbortError(f"non-finite gradient norm at batch {batch_index}")
    clip_gradients(model.store, config.clip_threshold)
    optimizer_step(model.store, opt_state, lr)
    logger.debug("batch %d: loss %.6f, grad norm %.4f", batch_index, loss.item(), norm)
    return BatchResult(loss.item(), block_errors(episode.probs, messages.indices), norm)


def calibrate_statistics(
    model: FeedbackCode, channel: ChannelConfig, config: TrainConfig, calibration_index: int
) -> None:
    """Re-estimates the running power statistics with the parameters held fixed.

    Runs ``config.calibration_batches`` fresh batches of ``config.audit_batch`` samples
    through the encoder; the plain average of their batch statistics replaces the
    running mean and variance used in inference mode.
    """
    pc = model.power_control
    with pc.calibrating():
        for k in range(config.calibration_batches):
            batch_index = calibration_index * config.calibration_batches + k
            rng = substream(config.seed, Stream.CALIBRATION, batch_index, Link.MESSAGES)
            messages = sample_messages(
                model.num_users, model.config.num_bits, config.audit_batch, rng
            )
            rollout_batch(model, channel, messages, batch_index, Stream.CALIBRATION, decode=False)
    logger.debug(
        "calibrated power statistics over %d x %d samples",
        config.calibration_batches,
        config.audit_batch,
    )


def power_audit(
    model: FeedbackCode, channel: ChannelConfig, config: TrainConfig, audit_index: int
) -> float:
    """Measures the mean block energy of the deployed encoder on a fresh audit batch.

    The encoder runs in inference mode on its stored running statistics, exactly as
    at evaluation; mode and statistics are left as they were.

    Raises:
        UninitializedStatisticsError: If some channel use has no running statistics.
    """
    rng = substream(config.seed, Stream.AUDIT, audit_index, Link.MESSAGES)
    messages = sample_messages(model.num_users, model.config.num_bits, config.audit_batch, rng)
    pc = model.power_control
    with pc.inference_mode(), pc.statistics_frozen():
        episode = rollout_batch(model, channel, messages, audit_index, Stream.AUDIT, decode=False)
    return measure_power(episode.transcript())


def audit_epoch(
    model: FeedbackCode, channel: ChannelConfig, config: TrainConfig, epoch: int
) -> float:
    """Calibrates the running statistics after ``epoch`` and audits the deployed power."""
    calibrate_statistics(model, channel, config, epoch)
    power = power_audit(model, channel, config, epoch)
    if abs(power - model.blocklength) > POWER_TOLERANCE * model.blocklength:
        logger.warning(
            "epoch %d: audited power %.4f is outside 2%% of N=%d",
            epoch,
            power,
            model.blocklength,
        )
    return power


def train_epoch(
    model: FeedbackCode,
    channel: ChannelConfig,
    config: TrainConfig,
    state: Optional[TrainingState] = None,
) -> MetricsRecord:
    """Runs one epoch of batches followed by calibration and the power audit.

    The learning rate of the epoch comes from the scheduler at the epoch's start, so
    a run resumed from a checkpoint follows the same schedule as an uninterrupted one.
    """
    if channel.num_users != model.num_users or channel.blocklength != model.blocklength:
        raise ConfigError(
            f"model (L={model.num_users}, N={model.blocklength}) does not fit channel "
            f"(L={channel.num_users}, N={channel.blocklength})"
        )
    state = state if state is not None else TrainingState.start(model, config)
    model.train_mode()
    lr = state.learning_rate = scheduler_step(config, state.epoch)
    losses, errors = [], np.zeros(model.num_users, dtype=np.int64)
    for _ in range(config.batches_per_epoch):
        result = train_batch(model, channel, config, state.optimizer, lr, state.batches_done)
        losses.append(result.loss)
        errors += result.errors
        state.batches_done += 1
    state.epoch += 1
    power = audit_epoch(model, channel, config, state.epoch)
    samples = config.batches_per_epoch * config.batch_size
    record = MetricsRecord(
        state.epoch,
        float(np.mean(losses)),
        tuple(float(e) / samples for e in errors),
        power,
        lr,
    )
    state.history.append(record)
    logger.info(
        "epoch %d: loss %.5f, bler %s, power %.4f, lr %.3g",
        record.epoch,
        record.loss,
        ", ".join(f"{b:.4g}" for b in record.bler),
        record.power,
        record.learning_rate,
    )
    return record


def train(
    model: FeedbackCode,
    channel: ChannelConfig,
    config: TrainConfig,
    state: Optional[TrainingState] = None,
    on_epoch: Optional[Callable[[MetricsRecord, TrainingState], None]] = None,
) -> list[MetricsRecord]:
    """Trains for the remaining epochs of ``state`` (all of them for a fresh run)."""
    state = state if state is not None else TrainingState.start(model, config)
    logger.info(
        "training %r for %d epochs of %d batches", model, config.epochs, config.batches_per_epoch
    )
    records = []
    while state.epoch < config.epochs:
        record = train_epoch(model, channel, config, state)
        records.append(record)
        if on_epoch is not None:
            on_epoch(record, state)
    return records


def _model_meta(model: FeedbackCode) -> dict[str, Any]:
    config = model.config.to_dict()
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "family": model.family,
        "model_config": config,
        "config_hash": canonical_hash({"family": model.family, **config}),
        "shapes": {name: list(tensor.shape) for name, tensor in model.store.items()},
    }


def checkpoint_save(
    model: FeedbackCode,
    path: Union[str, os.PathLike],
    state: Optional[ResumableState] = None,
    experiment_hash: Optional[str] = None,
) -> None:
    """Writes the model, its power statistics and optionally the training state.

    Args:
        model: The code to save.
        path: Target ``.npz`` file.
        state: A global or federated training state; saved so the run can resume.
        experiment_hash: Hash of the experiment settings that produced the model.
    """
    meta = _model_meta(model)
    meta["experiment_hash"] = experiment_hash
    little = np.dtype("<f8")
    arrays = {f"param::{name}": t.values.astype(little) for name, t in model.store.items()}
    arrays.update(
        {
            f"power::{key}": np.asarray(value, dtype=little)
            for key, value in model.power_control.state_dict().items()
        }
    )
    if state is not None:
        meta["training"], training_arrays = state.checkpoint_record()
        arrays.update({key: value.astype(little) for key, value in training_arrays.items()})
    else:
        meta["training"] = None
    with open(path, "wb") as handle:
        np.savez(handle, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    logger.debug("saved checkpoint %s (%s)", path, meta["config_hash"][:12])


def _read_archive(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (OSError, ValueError) as error:
        raise CheckpointMismatchError(f"cannot read checkpoint {path}: {error}") from error
    if "meta" not in arrays:
        raise CheckpointMismatchError(f"{path} has no meta record")
    meta = json.loads(str(arrays.pop("meta")))
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return meta, arrays


def checkpoint_load(
    path: Union[str, os.PathLike],
    expected_config=None,
    expected_experiment_hash: Optional[str] = None,
) -> FeedbackCode:
    """Rebuilds a model from a checkpoint.

    Args:
        path: File written by checkpoint_save.
        expected_config: Optional code config the checkpoint must match exactly.
        expected_experiment_hash: Optional hash of the experiment settings the model
          must have been trained under.

    Raises:
        CheckpointMismatchError: On a version, family, dimension, name, shape or
          experiment mismatch.
    """
    meta, arrays = _read_archive(path)
    family = meta["family"]
    if family not in CODE_FAMILIES:
        raise CheckpointMismatchError(f"checkpoint holds unknown family {family!r}")
    config = CODE_FAMILIES[family].config_class.from_dict(meta["model_config"])
    if expected_config is not None and expected_config != config:
        expected = expected_config.to_dict()
        stored = config.to_dict()
        differing = sorted(k for k in set(expected) | set(stored) if expected.get(k) != stored.get(k))
        raise CheckpointMismatchError(
            f"checkpoint config differs in {differing}: stored {stored}, expected {expected}"
        )
    stored_hash = meta.get("experiment_hash")
    if expected_experiment_hash is not None and stored_hash != expected_experiment_hash:
        raise CheckpointMismatchError(
            f"{path} was trained under experiment {str(stored_hash)[:12]}, "
            f"expected {expected_experiment_hash[:12]}"
        )
    model = build_code(family, config)
    params = {key.split("::", 1)[1]: value for key, value in arrays.items() if key.startswith("param::")}
    model.store.load_state_dict(params)
    power = {key.split("::", 1)[1]: value for key, value in arrays.items() if key.startswith("power::")}
    model.power_control.load_state_dict(power)
    logger.debug("loaded %r from %s", model, path)
    return model


def read_training_record(
    path: Union[str, os.PathLike],
) -> Optional[tuple[dict[str, Any], dict[str, np.ndarray]]]:
    """The training-state meta record and arrays of a checkpoint; None if it has none."""
    meta, arrays = _read_archive(path)
    training = meta.get("training")
    if training is None:
        return None
    return training, arrays


def checkpoint_load_optimizer(
    path: Union[str, os.PathLike], model: FeedbackCode
) -> Optional[TrainingState]:
    """Restores the global training state saved with a checkpoint, if there is one.

    Raises:
        CheckpointMismatchError: If the checkpoint holds a federated state or its
          optimizer moments do not cover the model's parameters.
    """
    found = read_training_record(path)
    if found is None:
        return None
    training, arrays = found
    kind = training.get("kind", "global")
    if kind != "global":
        raise CheckpointMismatchError(f"{path} holds a {kind} training state, not a global one")
    optimizer = unpack_optimizer_state(training["optimizer"], arrays, "opt", list(model.store))
    return TrainingState(
        optimizer, training["learning_rate"], training["epoch"], training["batches_done"]
    )
