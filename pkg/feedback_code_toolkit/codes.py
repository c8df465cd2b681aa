"""
Pieces shared by the two code families: message blocks, the binary mapping, the common
model interface and the episode rollout used by training and evaluation alike.
"""

import abc
import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, ClassVar, Optional, Sequence, Union

import numpy as np

from feedback_code_toolkit.autodiff import ParameterStore, Tensor, constant
from feedback_code_toolkit.channel import (
    EpisodeNoise,
    Transcript,
    feedback_step,
    forward_step,
)
from feedback_code_toolkit.exceptions import ConfigError, ContractError, DimensionError
from feedback_code_toolkit.power_control import PowerControl, freeze_statistics

__all__ = [
    "f_bin",
    "f_index",
    "indices_to_bits",
    "MessageBlock",
    "CodeConfig",
    "FeedbackCode",
    "Episode",
    "CODE_FAMILIES",
    "register_code",
    "build_code",
    "decode_hard",
    "run_episode",
]

logger = logging.getLogger(__name__)


def f_bin(index: int, k: int) -> np.ndarray:
    """Binary expansion of ``index`` on ``k`` bits, most significant bit first.

    >>> f_bin(5, 3)
    array([1, 0, 1])
    """
    if not 0 <= index < 2**k:
        raise IndexError(f"message index {index} outside [0, {2**k})")
    return np.array([(index >> (k - 1 - j)) & 1 for j in range(k)], dtype=np.int64)


def f_index(bits: Sequence[int]) -> int:
    """Inverse of f_bin."""
    index = 0
    for bit in bits:
        if bit not in (0, 1):
            raise ValueError(f"bits must be 0 or 1, got {bit}")
        index = (index << 1) | int(bit)
    return index


def indices_to_bits(indices: np.ndarray, k: int) -> np.ndarray:
    """Vectorized f_bin: appends a trailing axis of ``k`` bits."""
    indices = np.asarray(indices, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= 2**k):
        raise IndexError(f"message indices outside [0, {2**k})")
    shifts = np.arange(k - 1, -1, -1)
    return (indices[..., np.newaxis] >> shifts) & 1


@dataclass(frozen=True)
class MessageBlock:
    """One batch of messages for every user.

    Attributes:
        indices: Integer array ``[L × B]`` of message indices in ``[0, 2^K)``.
        k: Bits per message.
    """

    indices: np.ndarray
    k: int

    def __post_init__(self):
        if np.ndim(self.indices) != 2:
            raise DimensionError(
                f"message indices must be [L × B], got shape {np.shape(self.indices)}"
            )
        indices_to_bits(self.indices, self.k)

    @property
    def num_users(self) -> int:
        return self.indices.shape[0]

    @property
    def batch_size(self) -> int:
        return self.indices.shape[1]

    @property
    def bits(self) -> np.ndarray:
        """``[L × B × K]`` bit array."""
        return indices_to_bits(self.indices, self.k)

    @property
    def bipolar(self) -> np.ndarray:
        """``[L × B × K]`` array in {−1, +1}."""
        return 2.0 * self.bits - 1.0

    def encoder_input(self) -> np.ndarray:
        """``[B × L·K]`` bipolar bits, user 0 first."""
        return np.concatenate(list(self.bipolar), axis=1)


@dataclass(frozen=True)
class CodeConfig:
    """Dimensions common to every code.

    Attributes:
        num_users: L.
        num_bits: K, bits per user message.
        blocklength: N, channel uses per block.
    """

    num_users: int
    num_bits: int
    blocklength: int

    def __post_init__(self):
        if self.num_users < 1 or self.blocklength < 1:
            raise ConfigError("codes need at least one user and one channel use")
        if self.num_bits < 1:
            raise ConfigError(f"K must be at least 1, got {self.num_bits}")

    @property
    def num_messages(self) -> int:
        return 2**self.num_bits

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        return {key: list(value) if isinstance(value, tuple) else value for key, value in out.items()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]):
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        kwargs = {
            key: tuple(value) if isinstance(value, list) else value
            for key, value in data.items()
        }
        return cls(**kwargs)


class FeedbackCode(abc.ABC):
    """An encoder with power control plus one decoder per user.

    Subclasses register every parameter in ``self.store`` under ``{prefix}.enc.*`` or
    ``{prefix}.dec{ℓ}.*`` and create ``self.power_control``.
    """

    family: ClassVar[str]
    prefix: ClassVar[str]
    config_class: ClassVar[type]

    def __init__(self, config: CodeConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.store = ParameterStore()
        self.power_control: PowerControl
        self._build(np.random.default_rng(seed))

    @abc.abstractmethod
    def _build(self, rng: np.random.Generator) -> None:
        """Registers all parameters, drawing initial values from ``rng``."""

    @abc.abstractmethod
    def initial_state(self, batch_size: int) -> Any:
        """The encoder state before channel use 0."""

    @abc.abstractmethod
    def encode_step(
        self, messages: MessageBlock, state: Any, t: int, z_now: Sequence[Tensor]
    ) -> tuple[Tensor, Any]:
        """Produces ``x[t]`` given the feedback ``z_ℓ[t]`` of every user."""

    @abc.abstractmethod
    def decode(self, user: int, received: Sequence[Tensor]) -> Tensor:
        """Maps ``y_ℓ[0..N−1]`` to a ``[B × 2^K]`` batch of distributions."""

    @property
    def num_users(self) -> int:
        return self.config.num_users

    @property
    def blocklength(self) -> int:
        return self.config.blocklength

    def encoder_names(self) -> list[str]:
        return self.store.names(f"{self.prefix}.enc.")

    def decoder_names(self, user: int) -> list[str]:
        return self.store.names(f"{self.prefix}.dec{user}.")

    def train_mode(self) -> None:
        self.power_control.train()

    def freeze_statistics(self) -> None:
        freeze_statistics(self.power_control)

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(L={self.num_users}, K={self.config.num_bits}, "
            f"N={self.blocklength}, parameters={self.store.num_parameters})"
        )


CODE_FAMILIES: dict[str, type[FeedbackCode]] = {}


def register_code(family: str) -> Callable[[type[FeedbackCode]], type[FeedbackCode]]:
    def decorator(cls):
        cls.family = family
        CODE_FAMILIES[family] = cls
        return cls

    return decorator


def build_code(family: str, config: Union[CodeConfig, dict], seed: int = 0) -> FeedbackCode:
    """Creates a freshly initialized code of the named family."""
    try:
        cls = CODE_FAMILIES[family]
    except KeyError:
        raise ConfigError(
            f"unknown model family {family!r}; expected one of {sorted(CODE_FAMILIES)}"
        ) from None
    if isinstance(config, dict):
        config = cls.config_class.from_dict(config)
    return cls(config, seed)


def decode_hard(p: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Index of the largest entry along the last axis; ties go to the lowest index."""
    values = p.values if isinstance(p, Tensor) else np.asarray(p)
    return np.argmax(values, axis=-1)


@dataclass
class Episode:
    """Tensors of one rolled-out batch.

    Attributes:
        messages: The transmitted messages.
        x: ``x[t]`` per channel use, each of shape ``(B,)``.
        y: ``y[ℓ][t]`` per user and channel use.
        z: ``z[t][ℓ]`` per channel use and user; ``z[0]`` holds zeros.
        probs: Decoder outputs per user, ``[B × 2^K]`` each, or None.
    """

    messages: MessageBlock
    x: list[Tensor]
    y: list[list[Tensor]]
    z: list[list[Tensor]]
    probs: Optional[list[Tensor]] = None

    def transcript(self) -> Transcript:
        x = np.stack([x_t.values for x_t in self.x], axis=1)
        y = np.stack([np.stack([y_t.values for y_t in y_l], axis=1) for y_l in self.y])
        z = np.stack(
            [np.stack([z_t[user].values for z_t in self.z], axis=1) for user in range(len(self.y))]
        )
        return Transcript(x, y, z)


def run_episode(
    code: FeedbackCode,
    messages: MessageBlock,
    noise: EpisodeNoise,
    decode: bool = True,
) -> Episode:
    """Rolls one batch through encoder, channel and (optionally) every decoder.

    Feedback has a one-step delay: ``z_ℓ[0] = 0`` and
    ``z_ℓ[t] = y_ℓ[t−1] + n_ℓ^b[t]``, so ``x[t]`` only depends on ``y[0..t−1]``.
    """
    num_users, n = code.num_users, code.blocklength
    if messages.num_users != num_users or noise.forward.shape[0] != num_users:
        raise ContractError(
            f"model serves {num_users} users but got {messages.num_users} message rows "
            f"and {noise.forward.shape[0]} noise rows"
        )
    if noise.forward.shape[2] != n:
        raise ContractError(
            f"model blocklength is {n} but the noise covers {noise.forward.shape[2]} uses"
        )
    if noise.batch_size != messages.batch_size:
        raise ContractError("noise and messages disagree on the batch size")
    batch = messages.batch_size
    z_now = [constant(np.zeros(batch)) for _ in range(num_users)]
    state = code.initial_state(batch)
    xs: list[Tensor] = []
    ys: list[list[Tensor]] = [[] for _ in range(num_users)]
    zs: list[list[Tensor]] = []
    for t in range(n):
        zs.append(z_now)
        x_t, state = code.encode_step(messages, state, t, z_now)
        xs.append(x_t)
        y_t = forward_step(x_t, noise.forward[:, :, t])
        for user in range(num_users):
            ys[user].append(y_t[user])
        if t + 1 < n:
            z_now = feedback_step(y_t, noise.feedback[:, :, t + 1])
    probs = [code.decode(user, ys[user]) for user in range(num_users)] if decode else None
    return Episode(messages, xs, ys, zs, probs)
