"""
Vertical-federated training over noisy links.

The encoder owns the loss. Each decoder sends its output distribution up the feedback
link, where it picks up additive noise before the loss is computed. The encoder
computes every decoder's gradient through that noisy graph, clips, power-scales each
gradient vector and sends it back over a noisy downlink; decoders update their local
parameter copies with what they receive, while the encoder keeps replicas updated
with the exact gradients. With both links noiseless the run is identical to global
training.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Any, Optional, Sequence, TextIO, Union

import numpy as np

from feedback_code_toolkit.autodiff import Tape, Tensor, add, backward, constant
from feedback_code_toolkit.channel import (
    ChannelConfig,
    Link,
    Stream,
    snr_db_to_variance,
    substream,
)
from feedback_code_toolkit.codes import FeedbackCode
from feedback_code_toolkit.exceptions import (
    CheckpointMismatchError,
    ConfigError,
    DimensionError,
    NumericalAbortError,
)
from feedback_code_toolkit.train_global import (
    BatchResult,
    MetricsRecord,
    OptimizerState,
    TrainConfig,
    block_errors,
    check_finite,
    clip_gradients,
    global_loss,
    audit_epoch,
    optimizer_step,
    pack_optimizer_state,
    read_training_record,
    rollout_batch,
    sample_messages,
    scheduler_step,
    unpack_optimizer_state,
)

__all__ = [
    "FederatedConfig",
    "PartyLedger",
    "TransferNoiseRecord",
    "TransferNoiseLog",
    "FederatedTrainingState",
    "transmit_decoder_output",
    "compute_gradient_power_scale",
    "transmit_gradients",
    "federated_train_batch",
    "federated_train_epoch",
    "federated_train",
    "load_federated_state",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederatedConfig:
    """Federated training settings.

    Attributes:
        base: The underlying training hyperparameters.
        output_noise_var: Noise variance on the decoder-output uplink; None uses the
          channel's feedback noise variance.
        grad_snr_db: SNR of the gradient downlink; None for a noiseless downlink.
        power_scaling: Whether each gradient vector is scaled to unit average power
          per entry before transmission.
    """

    base: TrainConfig = field(default_factory=TrainConfig)
    output_noise_var: Optional[float] = None
    grad_snr_db: Optional[float] = None
    power_scaling: bool = True

    def __post_init__(self):
        if self.output_noise_var is not None and self.output_noise_var < 0:
            raise ConfigError("output_noise_var must be nonnegative")

    def output_variance(self, channel: ChannelConfig) -> float:
        return channel.sigma_b_sq if self.output_noise_var is None else self.output_noise_var

    def to_dict(self) -> dict[str, Any]:
        return {
            "output_noise_var": self.output_noise_var,
            "grad_snr_db": self.grad_snr_db,
            "power_scaling": self.power_scaling,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: TrainConfig) -> "FederatedConfig":
        unknown = set(data) - {f.name for f in fields(cls) if f.name != "base"}
        if unknown:
            raise ConfigError(f"unknown federated keys: {sorted(unknown)}")
        return cls(base=base, **data)


def transmit_decoder_output(p: Tensor, noise: np.ndarray) -> Tensor:
    """Adds uplink noise to a batch of decoder outputs; no renormalization."""
    if noise.shape != p.shape:
        raise DimensionError(f"uplink noise shape {noise.shape} does not fit outputs {p.shape}")
    return add(p, constant(noise))


def compute_gradient_power_scale(grad: np.ndarray, n_grad: Optional[int] = None) -> float:
    """``P_grad = N_grad/‖grad‖²`` so that ``√P_grad·grad`` carries energy ``N_grad``.

    ``N_grad`` defaults to the number of entries. A zero gradient gets scale 1.
    """
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    n_grad = grad.size if n_grad is None else n_grad
    energy = float(np.dot(grad, grad))
    if energy == 0.0:
        return 1.0
    return n_grad / energy


def transmit_gradients(
    grad: np.ndarray,
    p_grad: float,
    grad_snr_db: Optional[float],
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Sends ``√P_grad·grad`` over the downlink and unscales at the receiver.

    Args:
        grad: The gradient vector.
        p_grad: Power scale, known at both ends.
        grad_snr_db: Downlink SNR against unit per-entry power; None is noiseless and
          returns an exact copy.
        rng: Noise generator; required unless the downlink is noiseless.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad_snr_db is None:
        return grad.copy()
    if rng is None:
        raise ValueError("a noisy downlink needs a random generator")
    amplitude = math.sqrt(p_grad)
    noise = rng.normal(0.0, math.sqrt(snr_db_to_variance(grad_snr_db)), size=grad.shape)
    return (amplitude * grad + noise) / amplitude


@dataclass
class PartyLedger:
    """Per-party state of a federated run.

    Attributes:
        replicas: Encoder-side copies of every decoder parameter, updated with the
          exact clipped gradients.
        encoder_state: Optimizer state of the encoder parameters.
        local_states: Per user, optimizer state of the decoder's local copies (the
          parameters in the model's store), fed by received gradients.
        replica_states: Per user, optimizer state of the encoder-side replicas.
    """

    replicas: dict[str, np.ndarray]
    encoder_state: OptimizerState
    local_states: list[OptimizerState]
    replica_states: list[OptimizerState]

    @classmethod
    def create(cls, model: FeedbackCode, config: TrainConfig) -> "PartyLedger":
        replicas = {
            name: model.store[name].values.copy()
            for user in range(model.num_users)
            for name in model.decoder_names(user)
        }
        return cls(
            replicas,
            OptimizerState.create(model.store, config, model.encoder_names()),
            [
                OptimizerState.create(model.store, config, model.decoder_names(user))
                for user in range(model.num_users)
            ],
            [
                OptimizerState.create(replicas, config, model.decoder_names(user))
                for user in range(model.num_users)
            ],
        )

    def divergence(self, model: FeedbackCode, user: int) -> float:
        """L2 distance between a decoder's local copy and its encoder-side replica."""
        return math.sqrt(
            sum(
                float(np.sum((model.store[name].values - self.replicas[name]) ** 2))
                for name in model.decoder_names(user)
            )
        )


@dataclass(frozen=True)
class TransferNoiseRecord:
    epoch: int
    batch: int
    user: int
    output_noise_power: float
    grad_norm: float
    p_grad: float
    received_error_norm: float
    divergence: float

    HEADER = (
        "epoch",
        "batch",
        "user",
        "output_noise_power",
        "grad_norm",
        "p_grad",
        "received_error_norm",
        "divergence",
    )

    def to_csv_row(self) -> list[str]:
        return [
            str(self.epoch),
            str(self.batch),
            str(self.user),
            repr(self.output_noise_power),
            repr(self.grad_norm),
            repr(self.p_grad),
            repr(self.received_error_norm),
            repr(self.divergence),
        ]


class TransferNoiseLog:
    """Writes transfer-noise records as CSV, one row per (batch, user).

    The header row is written on construction unless ``header`` is false, as when
    a resumed run appends to an existing log.
    """

    def __init__(self, handle: TextIO, header: bool = True):
        self._writer = csv.writer(handle, lineterminator="\n")
        self._handle = handle
        if header:
            self._writer.writerow(TransferNoiseRecord.HEADER)

    def write(self, records: Sequence[TransferNoiseRecord]) -> None:
        for record in records:
            self._writer.writerow(record.to_csv_row())
        self._handle.flush()


@dataclass
class FederatedTrainingState:
    ledger: PartyLedger
    learning_rate: float
    epoch: int = 0
    batches_done: int = 0
    history: list[MetricsRecord] = field(default_factory=list)

    @classmethod
    def start(cls, model: FeedbackCode, config: FederatedConfig) -> "FederatedTrainingState":
        return cls(PartyLedger.create(model, config.base), scheduler_step(config.base, 0))

    def checkpoint_record(self) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
        ledger = self.ledger
        encoder, arrays = pack_optimizer_state(ledger.encoder_state, "enc")
        local, replica = [], []
        for user, (local_state, replica_state) in enumerate(
            zip(ledger.local_states, ledger.replica_states)
        ):
            record, user_arrays = pack_optimizer_state(local_state, f"local{user}")
            local.append(record)
            arrays.update(user_arrays)
            record, user_arrays = pack_optimizer_state(replica_state, f"replica{user}")
            replica.append(record)
            arrays.update(user_arrays)
        arrays.update({f"replica::{name}": values for name, values in ledger.replicas.items()})
        return {
            "kind": "federated",
            "epoch": self.epoch,
            "batches_done": self.batches_done,
            "learning_rate": self.learning_rate,
            "encoder": encoder,
            "local": local,
            "replica": replica,
        }, arrays


def _uplink_noise(channel: ChannelConfig, batch_index: int, user: int, shape, variance) -> np.ndarray:
    rng = substream(channel.seed, Stream.TRAINING, batch_index, Link.OUTPUT_UPLINK, user)
    return rng.normal(0.0, math.sqrt(variance), size=shape)


def federated_train_batch(
    model: FeedbackCode,
    channel: ChannelConfig,
    fed: FederatedConfig,
    ledger: PartyLedger,
    lr: float,
    batch_index: int,
    epoch: int = 0,
) -> tuple[BatchResult, list[TransferNoiseRecord]]:
    """Runs one federated round.

    Returns:
        The batch result (loss measured on the noiseless decoder outputs) and one
        transfer-noise record per user.
    """
    config = fed.base
    rng = substream(config.seed, Stream.TRAINING, batch_index, Link.MESSAGES)
    messages = sample_messages(model.num_users, model.config.num_bits, config.batch_size, rng)
    variance = fed.output_variance(channel)
    noise_powers = []
    model.store.zero_grad()
    with Tape() as tape:
        episode = rollout_batch(model, channel, messages, batch_index)
        received = []
        for user, p in enumerate(episode.probs):
            if variance > 0:
                noise = _uplink_noise(channel, batch_index, user, p.shape, variance)
                received.append(transmit_decoder_output(p, noise))
                noise_powers.append(float(np.mean(noise**2)))
            else:
                received.append(p)
                noise_powers.append(0.0)
        loss = global_loss(received, messages.indices)
    check_finite(tape, loss, batch_index)
    backward(tape, loss, model.store)
    norm = model.store.global_grad_norm()
    if not math.isfinite(norm):
        raise NumericalAbortError(f"non-finite gradient norm at batch {batch_index}")
    user_norms = [model.store.global_grad_norm(model.decoder_names(u)) for u in range(model.num_users)]
    clip_gradients(model.store, config.clip_threshold)

    optimizer_step(model.store, ledger.encoder_state, lr)
    records = []
    for user in range(model.num_users):
        names = model.decoder_names(user)
        exact = {name: model.store.grad(name).copy() for name in names}
        flat = np.concatenate([exact[name].reshape(-1) for name in names])
        p_grad = compute_gradient_power_scale(flat) if fed.power_scaling else 1.0
        downlink = substream(channel.seed, Stream.TRAINING, batch_index, Link.GRADIENT_DOWNLINK, user)
        received_flat = transmit_gradients(flat, p_grad, fed.grad_snr_db, downlink)
        offsets = np.cumsum([exact[name].size for name in names])[:-1]
        received_grads = {
            name: chunk.reshape(exact[name].shape)
            for name, chunk in zip(names, np.split(received_flat, offsets))
        }
        optimizer_step(model.store, ledger.local_states[user], lr, gradients=received_grads)
        optimizer_step(ledger.replicas, ledger.replica_states[user], lr, gradients=exact)
        records.append(
            TransferNoiseRecord(
                epoch,
                batch_index,
                user,
                noise_powers[user],
                user_norms[user],
                p_grad,
                float(np.linalg.norm(received_flat - flat)),
                ledger.divergence(model, user),
            )
        )
    clean_loss = global_loss([constant(p.values) for p in episode.probs], messages.indices)
    logger.debug(
        "federated batch %d: encoder loss %.6f, clean loss %.6f, divergence %s",
        batch_index,
        loss.item(),
        clean_loss.item(),
        [round(r.divergence, 6) for r in records],
    )
    result = BatchResult(clean_loss.item(), block_errors(episode.probs, messages.indices), norm)
    return result, records


def federated_train_epoch(
    model: FeedbackCode,
    channel: ChannelConfig,
    fed: FederatedConfig,
    state: Optional[FederatedTrainingState] = None,
    log: Optional[TransferNoiseLog] = None,
) -> MetricsRecord:
    """Runs one federated epoch followed by calibration and the power audit."""
    config = fed.base
    state = state if state is not None else FederatedTrainingState.start(model, fed)
    model.train_mode()
    lr = state.learning_rate = scheduler_step(config, state.epoch)
    losses, errors = [], np.zeros(model.num_users, dtype=np.int64)
    for _ in range(config.batches_per_epoch):
        result, records = federated_train_batch(
            model, channel, fed, state.ledger, lr, state.batches_done, state.epoch + 1
        )
        if log is not None:
            log.write(records)
        losses.append(result.loss)
        errors += result.errors
        state.batches_done += 1
    state.epoch += 1
    power = audit_epoch(model, channel, config, state.epoch)
    samples = config.batches_per_epoch * config.batch_size
    record = MetricsRecord(
        state.epoch, float(np.mean(losses)), tuple(float(e) / samples for e in errors), power, lr
    )
    state.history.append(record)
    logger.info(
        "federated epoch %d: loss %.5f, bler %s, divergence %s",
        record.epoch,
        record.loss,
        ", ".join(f"{b:.4g}" for b in record.bler),
        ", ".join(f"{state.ledger.divergence(model, u):.4g}" for u in range(model.num_users)),
    )
    return record


def federated_train(
    model: FeedbackCode,
    channel: ChannelConfig,
    fed: FederatedConfig,
    state: Optional[FederatedTrainingState] = None,
    log_path: Optional[Union[str, os.PathLike]] = None,
    append: bool = False,
) -> list[MetricsRecord]:
    """Runs all remaining federated epochs, optionally logging transfer noise to CSV.

    With ``append`` the log is extended without a new header, for resumed runs.
    """
    state = state if state is not None else FederatedTrainingState.start(model, fed)
    logger.info(
        "federated training of %r: uplink variance %g, downlink SNR %s dB",
        model,
        fed.output_variance(channel),
        "noiseless" if fed.grad_snr_db is None else fed.grad_snr_db,
    )
    handle = open(log_path, "a" if append else "w", newline="") if log_path is not None else None
    try:
        log = TransferNoiseLog(handle, header=not append) if handle is not None else None
        records = []
        while state.epoch < fed.base.epochs:
            records.append(federated_train_epoch(model, channel, fed, state, log))
        return records
    finally:
        if handle is not None:
            handle.close()


def load_federated_state(
    path: Union[str, os.PathLike], model: FeedbackCode
) -> Optional[FederatedTrainingState]:
    """Restores the federated training state saved with a checkpoint, if there is one.

    Raises:
        CheckpointMismatchError: If the checkpoint holds a global state or its
          per-party records do not fit the model.
    """
    found = read_training_record(path)
    if found is None:
        return None
    training, arrays = found
    kind = training.get("kind", "global")
    if kind != "federated":
        raise CheckpointMismatchError(f"{path} holds a {kind} training state, not a federated one")
    if len(training["local"]) != model.num_users or len(training["replica"]) != model.num_users:
        raise CheckpointMismatchError(
            f"{path} holds federated state for {len(training['local'])} users, "
            f"model has {model.num_users}"
        )
    replicas = {}
    for user in range(model.num_users):
        for name in model.decoder_names(user):
            key = f"replica::{name}"
            if key not in arrays:
                raise CheckpointMismatchError(f"federated state lacks decoder replica {name!r}")
            replicas[name] = np.array(arrays[key], dtype=np.float64)
    ledger = PartyLedger(
        replicas,
        unpack_optimizer_state(training["encoder"], arrays, "enc", model.encoder_names()),
        [
            unpack_optimizer_state(record, arrays, f"local{user}", model.decoder_names(user))
            for user, record in enumerate(training["local"])
        ],
        [
            unpack_optimizer_state(record, arrays, f"replica{user}", model.decoder_names(user))
            for user, record in enumerate(training["replica"])
        ],
    )
    return FederatedTrainingState(
        ledger, training["learning_rate"], training["epoch"], training["batches_done"]
    )
