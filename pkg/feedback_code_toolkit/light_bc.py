"""
LightBC: a lightweight symbol-by-symbol code for the broadcast channel.

At every channel use the encoder feeds a fixed-width vector (the bipolar messages, the
past transmitted symbols and every user's feedback history, newest first and zero
padded) through a feature extractor and a two-layer MLP, then through power control.
Each decoder applies a feature extractor to its whole received block followed by a
single affine layer and a softmax.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from feedback_code_toolkit.autodiff import (
    Tensor,
    add_affine,
    affine,
    concat,
    constant,
    relu_op,
    select,
    softmax_op,
    stack,
)
from feedback_code_toolkit.codes import CodeConfig, FeedbackCode, MessageBlock, register_code
from feedback_code_toolkit.exceptions import ConfigError, ContractError, DimensionError
from feedback_code_toolkit.power_control import PowerControl, apply_weight, normalize_batch

__all__ = [
    "LightConfig",
    "FeatureExtractorParams",
    "LightEncoderParams",
    "LightDecoderParams",
    "LightState",
    "LightBC",
    "encoder_input_dim",
    "pad_history",
    "unpad_history",
    "light_raw_symbol",
    "light_encode_step",
    "light_decode",
]

Series = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class LightConfig(CodeConfig):
    """LightBC dimensions.

    Attributes:
        fe_hidden: Hidden width d_h of every feature extractor.
        enc_features: N_r,e, the encoder feature size.
        enc_mlp_hidden: d_m, the hidden width of the encoder MLP.
        dec_features: N_r,d, the decoder feature size.
    """

    fe_hidden: int = 64
    enc_features: int = 64
    enc_mlp_hidden: int = 64
    dec_features: int = 64

    def __post_init__(self):
        super().__post_init__()
        for name in ("fe_hidden", "enc_features", "enc_mlp_hidden", "dec_features"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


class FeatureExtractorParams(NamedTuple):
    """Three affine layers with a ReLU after each of the first two."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        hidden = relu_op(affine(x, self.w1, self.b1))
        hidden = relu_op(affine(hidden, self.w2, self.b2))
        return affine(hidden, self.w3, self.b3)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]


class LightEncoderParams(NamedTuple):
    fe: FeatureExtractorParams
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


class LightDecoderParams(NamedTuple):
    fe: FeatureExtractorParams
    out_weight: Tensor
    out_bias: Tensor


@dataclass
class LightState:
    """Histories seen by the encoder so far, oldest first."""

    x_past: list[Tensor] = field(default_factory=list)
    z_past: list[list[Tensor]] = field(default_factory=list)


def encoder_input_dim(num_users: int, num_bits: int, n: int) -> int:
    return num_users * num_bits + (n - 1) + num_users * (n - 1)


def _history_block(history: Sequence[Series], slots: int, batch: int) -> Tensor:
    newest_first = [h if isinstance(h, Tensor) else constant(h) for h in reversed(history)]
    padding = [constant(np.zeros(batch)) for _ in range(slots - len(history))]
    return stack(newest_first + padding)


def pad_history(
    messages: np.ndarray,
    x_past: Sequence[Series],
    z_past: Sequence[Sequence[Series]],
    t: int,
    n: int,
) -> Tensor:
    """Builds the fixed-width encoder input for channel use ``t``.

    Layout: ``[messages (L·K) | x[t−1], …, x[0] (N−1 slots) | for each user
    z_ℓ[t], …, z_ℓ[1] (N−1 slots)]``; slots without history hold zeros.

    Args:
        messages: ``[B × L·K]`` bipolar message bits.
        x_past: ``x[0..t−1]``, oldest first, each of shape ``(B,)``.
        z_past: Per user, ``z_ℓ[1..t]`` oldest first.
        t: Channel use, 0-based.
        n: Blocklength N.

    Raises:
        ContractError: If a history is longer than ``t`` or ``t`` is outside the block.
    """
    if not 0 <= t < n:
        raise ContractError(f"channel use {t} outside [0, {n})")
    if len(x_past) > t or any(len(z_l) > t for z_l in z_past):
        raise ContractError(f"history longer than the {t} channel uses before {t}")
    batch = messages.shape[0]
    parts = [constant(messages)]
    if n > 1:
        parts.append(_history_block(x_past, n - 1, batch))
        parts.extend(_history_block(z_l, n - 1, batch) for z_l in z_past)
    return concat(parts)


def unpad_history(
    vector: np.ndarray, num_users: int, num_bits: int, n: int, t: int
) -> tuple[np.ndarray, list[np.ndarray], list[list[np.ndarray]]]:
    """Splits an encoder input built by pad_history back into its parts.

    Returns:
        ``(messages, x_past, z_past)`` with histories oldest first, each entry of
        shape ``(B,)``.
    """
    vector = np.asarray(vector)
    if vector.shape[-1] != encoder_input_dim(num_users, num_bits, n):
        raise DimensionError(
            f"encoder input width {vector.shape[-1]} does not fit L={num_users}, "
            f"K={num_bits}, N={n}"
        )
    width = num_users * num_bits
    messages = vector[:, :width]
    blocks = [vector[:, width + i * (n - 1) : width + (i + 1) * (n - 1)] for i in range(num_users + 1)]
    x_past = [blocks[0][:, j] for j in reversed(range(t))]
    z_past = [[block[:, j] for j in reversed(range(t))] for block in blocks[1:]]
    return messages, x_past, z_past


def light_raw_symbol(
    messages: np.ndarray,
    x_past: Sequence[Series],
    z_past: Sequence[Sequence[Series]],
    t: int,
    params: LightEncoderParams,
    n: int,
) -> Tensor:
    """Computes ``x̃[t] = MLP(FE(padded input))`` before power control."""
    inputs = pad_history(messages, x_past, z_past, t, n)
    if inputs.shape[-1] != params.fe.input_dim:
        raise DimensionError(
            f"light encoder feature extractor: input width {inputs.shape[-1]} but the "
            f"layer expects {params.fe.input_dim}"
        )
    features = params.fe(inputs)
    hidden = relu_op(affine(features, params.mlp_w1, params.mlp_b1))
    return select(affine(hidden, params.mlp_w2, params.mlp_b2), 0)


def light_encode_step(
    messages: np.ndarray,
    x_past: Sequence[Series],
    z_past: Sequence[Sequence[Series]],
    t: int,
    params: LightEncoderParams,
    power_control: PowerControl,
) -> Tensor:
    """Produces the power-controlled symbol ``x[t]``."""
    x_tilde = light_raw_symbol(messages, x_past, z_past, t, params, power_control.n)
    return apply_weight(normalize_batch(x_tilde, power_control, t), power_control, t)


def light_decode(received: Sequence[Tensor], params: LightDecoderParams) -> Tensor:
    """Maps one user's received block to a batch of distributions.

    Raises:
        ContractError: If the number of symbols differs from the decoder's input width.
    """
    if len(received) != params.fe.input_dim:
        raise ContractError(
            f"light decoder expects {params.fe.input_dim} received symbols, got {len(received)}"
        )
    features = params.fe(stack(received))
    return softmax_op(affine(features, params.out_weight, params.out_bias))


def _add_feature_extractor(store, prefix, in_dim, hidden, out_dim, rng) -> FeatureExtractorParams:
    w1, b1 = add_affine(store, f"{prefix}.fe1", in_dim, hidden, rng)
    w2, b2 = add_affine(store, f"{prefix}.fe2", hidden, hidden, rng)
    w3, b3 = add_affine(store, f"{prefix}.fe3", hidden, out_dim, rng)
    return FeatureExtractorParams(w1, b1, w2, b2, w3, b3)


@register_code("light_bc")
class LightBC(FeedbackCode):
    """LightBC with parameters named ``light.enc.*`` and ``light.dec{ℓ}.*``."""

    prefix = "light"
    config_class = LightConfig

    def _build(self, rng: np.random.Generator) -> None:
        cfg: LightConfig = self.config
        n = cfg.blocklength
        fe = _add_feature_extractor(
            self.store,
            "light.enc",
            encoder_input_dim(cfg.num_users, cfg.num_bits, n),
            cfg.fe_hidden,
            cfg.enc_features,
            rng,
        )
        mlp_w1, mlp_b1 = add_affine(self.store, "light.enc.mlp1", cfg.enc_features, cfg.enc_mlp_hidden, rng)
        mlp_w2, mlp_b2 = add_affine(self.store, "light.enc.mlp2", cfg.enc_mlp_hidden, 1, rng)
        self.encoder = LightEncoderParams(fe, mlp_w1, mlp_b1, mlp_w2, mlp_b2)
        self.power_control = PowerControl(self.store, "light.enc.power", n)

        self.decoders = []
        for user in range(cfg.num_users):
            prefix = f"light.dec{user}"
            dec_fe = _add_feature_extractor(self.store, prefix, n, cfg.fe_hidden, cfg.dec_features, rng)
            out_weight, out_bias = add_affine(
                self.store, f"{prefix}.out", cfg.dec_features, cfg.num_messages, rng
            )
            self.decoders.append(LightDecoderParams(dec_fe, out_weight, out_bias))

    def initial_state(self, batch_size: int) -> LightState:
        return LightState([], [[] for _ in range(self.num_users)])

    def encode_step(self, messages: MessageBlock, state: LightState, t, z_now):
        if t > 0:
            z_past = [z_l + [z] for z_l, z in zip(state.z_past, z_now)]
        else:
            z_past = state.z_past
        x_t = light_encode_step(
            messages.encoder_input(), state.x_past, z_past, t, self.encoder, self.power_control
        )
        return x_t, LightState(state.x_past + [x_t], z_past)

    def decode(self, user: int, received: Sequence[Tensor]) -> Tensor:
        return light_decode(received, self.decoders[user])
