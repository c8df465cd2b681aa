"""
RPC-BC: a state-propagating recurrent encoder for the broadcast channel.

The encoder runs two stacked GRU cells over the bipolar messages of all users and the
latest feedback symbol of every user, maps the top state to one symbol through a tanh
layer and passes it through power control. Each user's decoder runs a two-layer GRU
stack forwards and another backwards over its received block, pools each direction
with trainable attention weights and classifies the pooled features with a softmax.
"""

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from feedback_code_toolkit.autodiff import (
    GRUCellParams,
    Tensor,
    add_affine,
    add_gru,
    affine,
    concat,
    constant,
    gru_cell,
    select,
    softmax_op,
    stack,
    tanh_op,
    weighted_sum,
)
from feedback_code_toolkit.codes import CodeConfig, FeedbackCode, MessageBlock, register_code
from feedback_code_toolkit.exceptions import ConfigError, ContractError, DimensionError
from feedback_code_toolkit.power_control import PowerControl, apply_weight, normalize_batch

__all__ = [
    "RpcConfig",
    "RpcEncoderParams",
    "RpcDecoderParams",
    "RpcState",
    "RpcBC",
    "rpc_raw_symbol",
    "rpc_encode_step",
    "rpc_decode",
]


@dataclass(frozen=True)
class RpcConfig(CodeConfig):
    """RPC-BC dimensions.

    Attributes:
        enc_state_dims: (N_s1, N_s2), the encoder GRU state sizes.
        dec_forward_dims: (N_r1^f, N_r2^f).
        dec_backward_dims: (N_r1^b, N_r2^b).
    """

    enc_state_dims: tuple[int, int] = (50, 50)
    dec_forward_dims: tuple[int, int] = (50, 50)
    dec_backward_dims: tuple[int, int] = (50, 50)

    def __post_init__(self):
        super().__post_init__()
        for name in ("enc_state_dims", "dec_forward_dims", "dec_backward_dims"):
            dims = getattr(self, name)
            if len(dims) != 2 or min(dims) < 1:
                raise ConfigError(f"{name} must hold two positive sizes, got {dims}")


class RpcEncoderParams(NamedTuple):
    gru1: GRUCellParams
    gru2: GRUCellParams
    out_weight: Tensor
    out_bias: Tensor


class RpcDecoderParams(NamedTuple):
    fwd1: GRUCellParams
    fwd2: GRUCellParams
    bwd1: GRUCellParams
    bwd2: GRUCellParams
    alpha_f: Tensor
    alpha_b: Tensor
    out_weight: Tensor
    out_bias: Tensor


class RpcState(NamedTuple):
    s1: Tensor
    s2: Tensor


def rpc_raw_symbol(
    messages: np.ndarray,
    z_now: Sequence[Tensor],
    state: RpcState,
    params: RpcEncoderParams,
) -> tuple[Tensor, RpcState]:
    """Computes ``x̃[t]`` before power control.

    Args:
        messages: ``[B × L·K]`` bipolar message bits.
        z_now: The current feedback symbol of each user, shape ``(B,)`` each.
        state: ``(s_1[t−1], s_2[t−1])``.
        params: Encoder weights.

    Returns:
        ``x̃[t]`` of shape ``(B,)`` in ``[−1, 1]`` and the new state.
    """
    feedback = stack(z_now)
    u = concat([constant(messages), feedback])
    if u.shape[-1] != params.gru1.input_dim:
        raise DimensionError(
            f"rpc encoder gru1: input width {u.shape[-1]} but the cell expects "
            f"{params.gru1.input_dim}"
        )
    s1 = gru_cell(u, state.s1, params.gru1)
    s2 = gru_cell(s1, state.s2, params.gru2)
    x_tilde = tanh_op(select(affine(s2, params.out_weight, params.out_bias), 0))
    return x_tilde, RpcState(s1, s2)


def rpc_encode_step(
    messages: np.ndarray,
    z_now: Sequence[Tensor],
    state: RpcState,
    params: RpcEncoderParams,
    power_control: PowerControl,
    t: int,
) -> tuple[Tensor, RpcState]:
    """Produces the power-controlled symbol ``x[t]`` and the next encoder state."""
    x_tilde, state = rpc_raw_symbol(messages, z_now, state, params)
    return apply_weight(normalize_batch(x_tilde, power_control, t), power_control, t), state


def _run_stack(inputs: list[Tensor], first: GRUCellParams, second: GRUCellParams) -> list[Tensor]:
    batch = inputs[0].shape[0]
    h1 = constant(np.zeros((batch, first.state_dim)))
    h2 = constant(np.zeros((batch, second.state_dim)))
    outputs = []
    for u in inputs:
        h1 = gru_cell(u, h1, first)
        h2 = gru_cell(h1, h2, second)
        outputs.append(h2)
    return outputs


def rpc_decode(received: Sequence[Tensor], params: RpcDecoderParams) -> Tensor:
    """Maps one user's received block ``y[0..N−1]`` to a batch of distributions.

    Raises:
        ContractError: If the number of symbols differs from the attention length.
    """
    n = params.alpha_f.shape[0]
    if len(received) != n:
        raise ContractError(f"rpc decoder expects {n} received symbols, got {len(received)}")
    steps = [stack([y_t]) for y_t in received]
    forward = _run_stack(steps, params.fwd1, params.fwd2)
    backward = _run_stack(steps[::-1], params.bwd1, params.bwd2)[::-1]
    pooled = concat([weighted_sum(forward, params.alpha_f), weighted_sum(backward, params.alpha_b)])
    return softmax_op(affine(pooled, params.out_weight, params.out_bias))


@register_code("rpc_bc")
class RpcBC(FeedbackCode):
    """RPC-BC with parameters named ``rpc.enc.*`` and ``rpc.dec{ℓ}.*``."""

    prefix = "rpc"
    config_class = RpcConfig

    def _build(self, rng: np.random.Generator) -> None:
        cfg: RpcConfig = self.config
        num_users, n = cfg.num_users, cfg.blocklength
        ns1, ns2 = cfg.enc_state_dims
        gru1 = add_gru(self.store, "rpc.enc.gru1", num_users * cfg.num_bits + num_users, ns1, rng)
        gru2 = add_gru(self.store, "rpc.enc.gru2", ns1, ns2, rng)
        out_weight, out_bias = add_affine(self.store, "rpc.enc.out", ns2, 1, rng)
        self.encoder = RpcEncoderParams(gru1, gru2, out_weight, out_bias)
        self.power_control = PowerControl(self.store, "rpc.enc.power", n)

        nf1, nf2 = cfg.dec_forward_dims
        nb1, nb2 = cfg.dec_backward_dims
        self.decoders = []
        for user in range(num_users):
            prefix = f"rpc.dec{user}"
            fwd1 = add_gru(self.store, f"{prefix}.fwd1", 1, nf1, rng)
            fwd2 = add_gru(self.store, f"{prefix}.fwd2", nf1, nf2, rng)
            bwd1 = add_gru(self.store, f"{prefix}.bwd1", 1, nb1, rng)
            bwd2 = add_gru(self.store, f"{prefix}.bwd2", nb1, nb2, rng)
            alpha_f = self.store.add(f"{prefix}.alpha_f", np.full(n, 1.0 / n))
            alpha_b = self.store.add(f"{prefix}.alpha_b", np.full(n, 1.0 / n))
            out_weight, out_bias = add_affine(
                self.store, f"{prefix}.out", nf2 + nb2, cfg.num_messages, rng
            )
            self.decoders.append(
                RpcDecoderParams(fwd1, fwd2, bwd1, bwd2, alpha_f, alpha_b, out_weight, out_bias)
            )

    def initial_state(self, batch_size: int) -> RpcState:
        ns1, ns2 = self.config.enc_state_dims
        return RpcState(constant(np.zeros((batch_size, ns1))), constant(np.zeros((batch_size, ns2))))

    def encode_step(self, messages: MessageBlock, state, t, z_now):
        return rpc_encode_step(
            messages.encoder_input(), z_now, state, self.encoder, self.power_control, t
        )

    def decode(self, user: int, received: Sequence[Tensor]) -> Tensor:
        return rpc_decode(received, self.decoders[user])
