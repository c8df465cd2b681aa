"""
Monte Carlo block error rate evaluation with hard-decision decoding.
"""

import copy
import logging
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from feedback_code_toolkit.channel import ChannelConfig, Link, Stream, draw_episode_noise, substream
from feedback_code_toolkit.codes import FeedbackCode, decode_hard, run_episode
from feedback_code_toolkit.config import NOISELESS, sum_rate
from feedback_code_toolkit.exceptions import CheckpointMismatchError, ContractError
from feedback_code_toolkit.train_global import checkpoint_load, sample_messages

__all__ = [
    "ResultRow",
    "decode_hard",
    "confidence_half_width",
    "run_bler_eval",
]

logger = logging.getLogger(__name__)

Z_95 = 1.96


def confidence_half_width(errors: float, samples: int) -> float:
    """Half-width of the 95% normal-approximation interval of ``errors/samples``.

    Rows without errors report the rule-of-three bound ``3/samples``.
    """
    if samples < 1:
        raise ContractError("confidence interval needs at least one sample")
    if not 0 <= errors <= samples:
        raise ContractError(f"{errors} errors in {samples} samples")
    if errors == 0:
        return 3.0 / samples
    p = errors / samples
    return Z_95 * math.sqrt(p * (1.0 - p) / samples)


def _format_optional(value: Optional[float]) -> str:
    return NOISELESS if value is None else repr(float(value))


def _parse_optional(text: str) -> Optional[float]:
    return None if text in (NOISELESS, "") else float(text)


@dataclass(frozen=True)
class ResultRow:
    """One evaluated operating point.

    Attributes:
        experiment_id: Identifier used to resume sweeps.
        scheme: "broadcast" for a joint code, "tdd" for a time-division composite.
        block_errors: Per-user block error counts.
        bler: Per-user block error rates.
        ci_half_width: 95% half-width of the average BLER.
    """

    experiment_id: str
    scheme: str
    model: str
    num_users: int
    num_bits: int
    blocklength: int
    sum_rate: float
    forward_snr_db: float
    feedback_noise_db: Optional[float]
    grad_snr_db: Optional[float]
    samples: int
    block_errors: tuple[int, ...]
    bler: tuple[float, ...]
    average_bler: float
    ci_half_width: float

    HEADER = (
        "experiment_id",
        "scheme",
        "model",
        "L",
        "K",
        "N",
        "R_sum",
        "forward_snr_db",
        "feedback_noise_db",
        "grad_snr_db",
        "samples",
        "block_errors",
        "bler",
        "average_bler",
        "ci_half_width",
    )

    def __post_init__(self):
        if any(not 0.0 <= b <= 1.0 for b in self.bler):
            raise ContractError(f"BLER outside [0, 1]: {self.bler}")

    def to_csv_row(self) -> list[str]:
        return [
            self.experiment_id,
            self.scheme,
            self.model,
            str(self.num_users),
            str(self.num_bits),
            str(self.blocklength),
            repr(self.sum_rate),
            repr(float(self.forward_snr_db)),
            _format_optional(self.feedback_noise_db),
            "" if self.grad_snr_db is None else repr(float(self.grad_snr_db)),
            str(self.samples),
            ";".join(str(e) for e in self.block_errors),
            ";".join(repr(b) for b in self.bler),
            repr(self.average_bler),
            repr(self.ci_half_width),
        ]

    @classmethod
    def from_csv_row(cls, row: Sequence[str]) -> "ResultRow":
        if len(row) != len(cls.HEADER):
            raise ValueError(f"result row has {len(row)} fields, expected {len(cls.HEADER)}")
        return cls(
            row[0],
            row[1],
            row[2],
            int(row[3]),
            int(row[4]),
            int(row[5]),
            float(row[6]),
            float(row[7]),
            _parse_optional(row[8]),
            None if row[9] == "" else float(row[9]),
            int(row[10]),
            tuple(int(e) for e in row[11].split(";")),
            tuple(float(b) for b in row[12].split(";")),
            float(row[13]),
            float(row[14]),
        )

    @classmethod
    def from_counts(
        cls,
        experiment_id: str,
        scheme: str,
        model: str,
        num_users: int,
        num_bits: int,
        blocklength: int,
        channel: ChannelConfig,
        samples: Sequence[int],
        errors: Sequence[int],
        grad_snr_db: Optional[float] = None,
    ) -> "ResultRow":
        """Builds a row from per-user error counts over per-user sample counts."""
        bler = tuple(e / s for e, s in zip(errors, samples))
        average = float(np.mean(bler))
        n = min(samples)
        return cls(
            experiment_id,
            scheme,
            model,
            num_users,
            num_bits,
            blocklength,
            sum_rate(num_users, num_bits, blocklength),
            channel.forward_snr_db,
            channel.feedback_noise_db,
            grad_snr_db,
            n,
            tuple(int(e) for e in errors),
            bler,
            average,
            confidence_half_width(average * n, n),
        )


def run_bler_eval(
    model: Union[FeedbackCode, str, os.PathLike],
    channel: ChannelConfig,
    max_samples: int,
    target_errors: int,
    batch_size: int = 10_000,
    seed: Optional[int] = None,
    experiment_id: str = "",
    grad_snr_db: Optional[float] = None,
) -> ResultRow:
    """Estimates every user's block error rate by Monte Carlo.

    Batches are drawn from the evaluation substreams until every user has
    ``target_errors`` errors or ``max_samples`` samples were decoded. The model is
    copied and its power statistics frozen; the caller's model is not modified.

    Args:
        model: A trained model or the path of a checkpoint.
        channel: Channel to evaluate on; must match the model's L and N.
        seed: Seed of the evaluation messages; defaults to the channel seed.

    Raises:
        CheckpointMismatchError: If the model does not fit the channel.
    """
    if not isinstance(model, FeedbackCode):
        model = checkpoint_load(model)
    if model.num_users != channel.num_users or model.blocklength != channel.blocklength:
        raise CheckpointMismatchError(
            f"model (L={model.num_users}, N={model.blocklength}) is incompatible with "
            f"channel (L={channel.num_users}, N={channel.blocklength})"
        )
    if max_samples < 1 or target_errors < 1 or batch_size < 1:
        raise ContractError("evaluation budgets must be positive")
    seed = channel.seed if seed is None else seed
    model = copy.deepcopy(model)
    model.freeze_statistics()

    errors = np.zeros(model.num_users, dtype=np.int64)
    samples, batch_index = 0, 0
    while samples < max_samples and np.any(errors < target_errors):
        size = min(batch_size, max_samples - samples)
        rng = substream(seed, Stream.EVALUATION, batch_index, Link.MESSAGES)
        messages = sample_messages(model.num_users, model.config.num_bits, size, rng)
        noise = draw_episode_noise(channel, batch_index, size, Stream.EVALUATION)
        episode = run_episode(model, messages, noise)
        for user, p in enumerate(episode.probs):
            errors[user] += int(np.sum(decode_hard(p) != messages.indices[user]))
        samples += size
        batch_index += 1
    row = ResultRow.from_counts(
        experiment_id,
        "broadcast",
        model.family,
        model.num_users,
        model.config.num_bits,
        model.blocklength,
        channel,
        [samples] * model.num_users,
        errors.tolist(),
        grad_snr_db,
    )
    logger.info(
        "evaluated %s: %d samples, errors %s, average BLER %.4g ± %.2g",
        experiment_id or model.family,
        samples,
        errors.tolist(),
        row.average_bler,
        row.ci_half_width,
    )
    return row
