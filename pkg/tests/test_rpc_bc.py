import copy

import numpy as np
import pytest

from feedback_code_toolkit import autodiff, rpc_bc
from feedback_code_toolkit.autodiff import constant
from feedback_code_toolkit.channel import ChannelConfig, Stream, draw_episode_noise, measure_power
from feedback_code_toolkit.codes import MessageBlock, run_episode
from feedback_code_toolkit.exceptions import ConfigError, ContractError, DimensionError
from feedback_code_toolkit.rpc_bc import RpcBC, RpcConfig
from feedback_code_toolkit.train_global import POWER_TOLERANCE, TrainConfig, global_loss, train


@pytest.fixture
def model():
    return RpcBC(
        RpcConfig(2, 2, 4, enc_state_dims=(4, 4), dec_forward_dims=(4, 4), dec_backward_dims=(4, 4)),
        seed=2,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(21)


def feedback(rng, num_users, batch):
    return [constant(rng.normal(size=batch)) for _ in range(num_users)]


def test_default_dimensions():
    config = RpcConfig(2, 6, 18)
    assert config.enc_state_dims == (50, 50)
    assert config.dec_forward_dims == (50, 50)
    assert config.dec_backward_dims == (50, 50)


def test_rejects_bad_dimensions():
    with pytest.raises(ConfigError):
        RpcConfig(2, 2, 4, enc_state_dims=(4,))


def test_raw_symbol_with_zero_parameters(model, rng):
    for _, tensor in model.store.items():
        tensor.values[...] = 0.0
    messages = MessageBlock(rng.integers(0, 4, size=(2, 6)), 2)
    x_tilde, state = rpc_bc.rpc_raw_symbol(
        messages.encoder_input(), feedback(rng, 2, 6), model.initial_state(6), model.encoder
    )
    assert np.array_equal(x_tilde.values, np.zeros(6))
    assert state.s1.shape == (6, 4)


def test_raw_symbol_is_bounded(model, rng):
    messages = MessageBlock(rng.integers(0, 4, size=(2, 50)), 2)
    z_now = [constant(rng.normal(0.0, 10.0, size=50)) for _ in range(2)]
    x_tilde, _ = rpc_bc.rpc_raw_symbol(messages.encoder_input(), z_now, model.initial_state(50), model.encoder)
    assert np.all(np.abs(x_tilde.values) <= 1.0)


def test_raw_symbol_names_the_failing_layer(model, rng):
    with pytest.raises(DimensionError) as error:
        rpc_bc.rpc_raw_symbol(np.ones((3, 5)), feedback(rng, 2, 3), model.initial_state(3), model.encoder)
    assert "gru1" in str(error.value)


def test_decoder_outputs_distributions(model, rng):
    received = [constant(rng.normal(size=7)) for _ in range(4)]
    probs = rpc_bc.rpc_decode(received, model.decoders[0]).values
    assert probs.shape == (7, 4)
    assert np.all((probs >= 0) & (probs <= 1))
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12


def test_decoder_rejects_wrong_block_length(model, rng):
    with pytest.raises(ContractError):
        rpc_bc.rpc_decode([constant(rng.normal(size=3)) for _ in range(3)], model.decoders[0])


def test_uniform_attention_averages_constant_outputs(rng):
    r = constant(rng.normal(size=(3, 5)))
    pooled = autodiff.weighted_sum([r] * 4, np.full(4, 0.25))
    assert np.allclose(pooled.values, r.values, atol=1e-12)


def test_attention_starts_uniform(model):
    assert np.array_equal(model.decoders[1].alpha_f.values, np.full(4, 0.25))
    assert np.array_equal(model.decoders[1].alpha_b.values, np.full(4, 0.25))


def test_decoders_with_equal_parameters_are_interchangeable(model, rng):
    for name in model.decoder_names(0):
        model.store[name.replace("rpc.dec0.", "rpc.dec1.")].values[...] = model.store[name].values
    first = [constant(rng.normal(size=5)) for _ in range(4)]
    second = [constant(rng.normal(size=5)) for _ in range(4)]
    assert np.array_equal(model.decode(0, first).values, model.decode(1, first).values)
    assert np.array_equal(model.decode(0, second).values, model.decode(1, second).values)


def test_trained_encoder_meets_power_constraint(model, rng):
    channel = ChannelConfig(2, 4, 1.0, 0.01, seed=4)
    config = TrainConfig(
        batch_size=64,
        epochs=2,
        total_samples=640,
        learning_rate=1e-2,
        optimizer="adam",
        scheduler="step_decay",
        audit_batch=50_000,
    )
    records = train(model, channel, config)
    assert records[-1].power == pytest.approx(4.0, rel=POWER_TOLERANCE)

    deployed = copy.deepcopy(model)
    deployed.freeze_statistics()
    batch = 100_000
    messages = MessageBlock(rng.integers(0, 4, size=(2, batch)), 2)
    noise = draw_episode_noise(channel, 0, batch, Stream.EVALUATION)
    episode = run_episode(deployed, messages, noise, decode=False)
    assert measure_power(episode.transcript()) == pytest.approx(4.0, rel=POWER_TOLERANCE)


def test_episode_gradient_matches_finite_differences(model, rng):
    channel = ChannelConfig(2, 4, 0.5, 0.05, seed=9)
    messages = MessageBlock(rng.integers(0, 4, size=(2, 4)), 2)
    noise = draw_episode_noise(channel, 0, 4)

    def loss(store):
        episode = run_episode(model, messages, noise)
        return global_loss(episode.probs, messages.indices)

    assert autodiff.finite_diff_check(loss, model.store) < 1e-4


def test_parameter_count_grows_with_users():
    one = RpcBC(RpcConfig(1, 2, 4, (4, 4), (4, 4), (4, 4)))
    two = RpcBC(RpcConfig(2, 2, 4, (4, 4), (4, 4), (4, 4)))
    assert two.store.num_parameters > one.store.num_parameters
    assert len(two.decoders) == 2
