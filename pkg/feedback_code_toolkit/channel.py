"""
The L-user AWGN broadcast channel with noisy feedback.

At channel use ``t`` (0-based) every receiver ``ℓ`` observes
``y_ℓ[t] = x[t] + n_ℓ^f[t]`` and the transmitter receives
``z_ℓ[t] = y_ℓ[t−1] + n_ℓ^b[t]`` for ``t ≥ 1``, with ``z_ℓ[0] = 0``.

Noise comes from independent numpy substreams keyed by (stream, batch, link, user), so
a batch can be regenerated bit for bit from the seed alone.
"""

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from feedback_code_toolkit.autodiff import Tensor, add, constant
from feedback_code_toolkit.exceptions import ConfigError, ContractError

__all__ = [
    "Link",
    "Stream",
    "ChannelConfig",
    "EpisodeNoise",
    "Transcript",
    "substream",
    "snr_db_to_variance",
    "noise_power_db_to_variance",
    "variance_to_snr_db",
    "variance_to_noise_power_db",
    "draw_episode_noise",
    "forward_step",
    "feedback_step",
    "measure_power",
]


class Link(enum.IntEnum):
    """Identifies which random quantity a substream feeds."""

    FORWARD = 0
    FEEDBACK = 1
    MESSAGES = 2
    OUTPUT_UPLINK = 3
    GRADIENT_DOWNLINK = 4


class Stream(enum.IntEnum):
    """Separates the random numbers of training, evaluation, power audits and calibration."""

    TRAINING = 0
    EVALUATION = 1
    AUDIT = 2
    CALIBRATION = 3


def substream(seed: int, *key: int) -> np.random.Generator:
    """Returns the generator for one (seed, key) pair.

    Distinct keys give statistically independent streams; equal keys give identical
    streams.
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(sequence)


def snr_db_to_variance(snr_db: float) -> float:
    """Noise variance reaching ``snr_db`` against unit per-symbol signal power."""
    return 10.0 ** (-snr_db / 10.0)


def noise_power_db_to_variance(power_db: float) -> float:
    """Converts a noise power in dB to a variance (−20 dB → 0.01)."""
    return 10.0 ** (power_db / 10.0)


def variance_to_snr_db(variance: float) -> float:
    if variance == 0:
        return math.inf
    return round(-10.0 * math.log10(variance), 6)


def variance_to_noise_power_db(variance: float) -> Optional[float]:
    """Inverse of noise_power_db_to_variance; None stands for a noiseless link."""
    if variance == 0:
        return None
    return round(10.0 * math.log10(variance), 6)


@dataclass(frozen=True)
class ChannelConfig:
    """Parameters of the broadcast channel.

    Attributes:
        num_users: Number of receivers L.
        blocklength: Channel uses per block N.
        sigma_f_sq: Forward noise variance.
        sigma_b_sq: Feedback noise variance.
        seed: Seed of every noise substream.
    """

    num_users: int
    blocklength: int
    sigma_f_sq: float
    sigma_b_sq: float
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1 or self.blocklength < 1:
            raise ConfigError(
                f"channel needs L ≥ 1 and N ≥ 1, got L={self.num_users}, "
                f"N={self.blocklength}"
            )
        if self.sigma_f_sq < 0 or self.sigma_b_sq < 0:
            raise ConfigError("noise variances must be nonnegative")

    @classmethod
    def from_db(
        cls,
        num_users: int,
        blocklength: int,
        forward_snr_db: float,
        feedback_noise_db: Optional[float],
        seed: int = 0,
    ) -> "ChannelConfig":
        """Builds a config from a forward SNR and a feedback noise power in dB.

        Args:
            feedback_noise_db: Feedback noise power in dB, or None for noiseless
              feedback.
        """
        sigma_b_sq = (
            0.0 if feedback_noise_db is None else noise_power_db_to_variance(feedback_noise_db)
        )
        return cls(num_users, blocklength, snr_db_to_variance(forward_snr_db), sigma_b_sq, seed)

    @property
    def forward_snr_db(self) -> float:
        return variance_to_snr_db(self.sigma_f_sq)

    @property
    def feedback_noise_db(self) -> Optional[float]:
        return variance_to_noise_power_db(self.sigma_b_sq)


@dataclass(frozen=True)
class EpisodeNoise:
    """Noise for one batch of episodes.

    Attributes:
        forward: Array ``[L × B × N]`` of forward noise.
        feedback: Array ``[L × B × N]`` of feedback noise; column 0 is unused.
    """

    forward: np.ndarray
    feedback: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.forward.shape[1]


def draw_episode_noise(
    config: ChannelConfig,
    batch_index: int,
    batch_size: int,
    stream: Stream = Stream.TRAINING,
) -> EpisodeNoise:
    """Draws forward and feedback noise for one batch from its substreams."""
    shape = (batch_size, config.blocklength)
    forward = np.empty((config.num_users, *shape))
    feedback = np.empty((config.num_users, *shape))
    sd_f, sd_b = math.sqrt(config.sigma_f_sq), math.sqrt(config.sigma_b_sq)
    for user in range(config.num_users):
        forward[user] = substream(config.seed, stream, batch_index, Link.FORWARD, user).normal(
            0.0, sd_f, size=shape
        )
        feedback[user] = substream(
            config.seed, stream, batch_index, Link.FEEDBACK, user
        ).normal(0.0, sd_b, size=shape)
    feedback[:, :, 0] = 0.0
    return EpisodeNoise(forward, feedback)


def forward_step(x_t: Tensor, noise_t: np.ndarray) -> list[Tensor]:
    """Broadcasts one symbol per sample to every receiver.

    Args:
        x_t: Transmitted symbols, shape ``(B,)``.
        noise_t: Forward noise, shape ``(L, B)``. Treated as a constant.

    Returns:
        One tensor ``y_ℓ[t]`` per user; gradients pass straight through to ``x_t``.
    """
    return [add(x_t, constant(noise)) for noise in noise_t]


def feedback_step(y_prev: Sequence[Tensor], noise_t: np.ndarray) -> list[Tensor]:
    """Returns ``z_ℓ[t] = y_ℓ[t−1] + n_ℓ^b[t]`` for every user."""
    return [add(y, constant(noise)) for y, noise in zip(y_prev, noise_t)]


@dataclass(frozen=True)
class Transcript:
    """One batch of coding episodes as plain arrays.

    Attributes:
        x: Transmitted symbols ``[B × N]``.
        y: Received symbols ``[L × B × N]``.
        z: Feedback symbols ``[L × B × N]`` with ``z[:, :, 0] = 0``.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray


def measure_power(signal: Union[Transcript, np.ndarray]) -> float:
    """Mean over the batch of ``Σ_t x²[t]``.

    Args:
        signal: A transcript or an array ``[B × N]`` of transmitted symbols.
    """
    x = signal.x if isinstance(signal, Transcript) else np.asarray(signal, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"measure_power needs a nonempty [B × N] batch, got {x.shape}")
    return float(np.mean(np.sum(x * x, axis=1)))
