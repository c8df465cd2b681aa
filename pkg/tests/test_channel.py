import numpy as np
import pytest

from feedback_code_toolkit import channel
from feedback_code_toolkit.autodiff import constant
from feedback_code_toolkit.channel import ChannelConfig, Stream
from feedback_code_toolkit.exceptions import ConfigError, ContractError


@pytest.fixture
def noisy():
    return ChannelConfig(num_users=2, blocklength=3, sigma_f_sq=0.5, sigma_b_sq=0.25, seed=7)


def test_decibel_conversions():
    assert channel.snr_db_to_variance(0.0) == 1.0
    assert channel.snr_db_to_variance(-3.0) == pytest.approx(1.99526, rel=1e-5)
    assert channel.noise_power_db_to_variance(-20.0) == pytest.approx(0.01)
    assert channel.variance_to_noise_power_db(0.0) is None
    assert channel.variance_to_noise_power_db(0.01) == pytest.approx(-20.0)


def test_from_db():
    config = ChannelConfig.from_db(2, 9, 0.0, -20.0, seed=3)
    assert config.sigma_f_sq == 1.0
    assert config.sigma_b_sq == pytest.approx(0.01)
    assert config.feedback_noise_db == pytest.approx(-20.0)
    assert config.forward_snr_db == pytest.approx(0.0)
    assert config.seed == 3


def test_from_db_noiseless_feedback():
    config = ChannelConfig.from_db(2, 9, 2.0, None)
    assert config.sigma_b_sq == 0.0
    assert config.feedback_noise_db is None


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(num_users=0, blocklength=3, sigma_f_sq=1.0, sigma_b_sq=0.0),
        dict(num_users=2, blocklength=0, sigma_f_sq=1.0, sigma_b_sq=0.0),
        dict(num_users=2, blocklength=3, sigma_f_sq=-1.0, sigma_b_sq=0.0),
        dict(num_users=2, blocklength=3, sigma_f_sq=1.0, sigma_b_sq=-0.1),
    ],
)
def test_invalid_channel_config(kwargs):
    with pytest.raises(ConfigError):
        ChannelConfig(**kwargs)


def test_noiseless_forward_step_is_exact():
    x = constant(np.array([0.3, -1.7, 2.5]))
    received = channel.forward_step(x, np.zeros((2, 3)))
    assert len(received) == 2
    for y in received:
        assert np.array_equal(y.values, x.values)


def test_feedback_step_adds_noise_to_previous_output():
    y_prev = [constant(np.array([1.0, 2.0])), constant(np.array([-1.0, 0.5]))]
    z = channel.feedback_step(y_prev, np.array([[0.1, 0.2], [0.0, -0.5]]))
    assert np.allclose(z[0].values, [1.1, 2.2])
    assert np.allclose(z[1].values, [-1.0, 0.0])


def test_episode_noise_shapes(noisy):
    noise = channel.draw_episode_noise(noisy, batch_index=0, batch_size=5)
    assert noise.forward.shape == (2, 5, 3)
    assert noise.feedback.shape == (2, 5, 3)
    assert noise.batch_size == 5
    assert np.array_equal(noise.feedback[:, :, 0], np.zeros((2, 5)))


def test_forward_noise_statistics():
    config = ChannelConfig(num_users=1, blocklength=1, sigma_f_sq=0.5, sigma_b_sq=0.0)
    noise = channel.draw_episode_noise(config, 0, 1_000_000).forward.ravel()
    assert abs(noise.mean()) < 4e-3
    assert noise.var() == pytest.approx(0.5, rel=0.01)


def test_feedback_noise_statistics():
    config = ChannelConfig(num_users=1, blocklength=3, sigma_f_sq=1.0, sigma_b_sq=0.25)
    noise = channel.draw_episode_noise(config, 0, 500_000).feedback[:, :, 1:].ravel()
    assert noise.var() == pytest.approx(0.25, rel=0.01)


def test_users_receive_independent_noise():
    config = ChannelConfig(num_users=2, blocklength=1, sigma_f_sq=1.0, sigma_b_sq=1.0)
    size = 200_000
    noise = channel.draw_episode_noise(config, 0, size)
    forward = np.corrcoef(noise.forward[0].ravel(), noise.forward[1].ravel())[0, 1]
    assert abs(forward) < 4 / np.sqrt(size)


def test_noise_is_reproducible(noisy):
    first = channel.draw_episode_noise(noisy, 4, 10)
    second = channel.draw_episode_noise(noisy, 4, 10)
    assert np.array_equal(first.forward, second.forward)
    assert np.array_equal(first.feedback, second.feedback)


def test_noise_differs_between_batches_and_streams(noisy):
    first = channel.draw_episode_noise(noisy, 0, 10)
    other_batch = channel.draw_episode_noise(noisy, 1, 10)
    other_stream = channel.draw_episode_noise(noisy, 0, 10, Stream.EVALUATION)
    assert not np.array_equal(first.forward, other_batch.forward)
    assert not np.array_equal(first.forward, other_stream.forward)


def test_substream_keys():
    same = channel.substream(1, 0, 2, 3).random(4)
    again = channel.substream(1, 0, 2, 3).random(4)
    other = channel.substream(1, 0, 2, 4).random(4)
    assert np.array_equal(same, again)
    assert not np.array_equal(same, other)


def test_measure_power():
    assert channel.measure_power(np.ones((4, 18))) == 18.0
    assert channel.measure_power(np.zeros((4, 18))) == 0.0
    transcript = channel.Transcript(
        x=np.array([[1.0, 1.0], [2.0, 0.0]]), y=np.zeros((1, 2, 2)), z=np.zeros((1, 2, 2))
    )
    assert channel.measure_power(transcript) == 3.0


@pytest.mark.parametrize("batch", [np.zeros((0, 3)), np.ones(3)])
def test_measure_power_rejects_bad_batches(batch):
    with pytest.raises(ContractError):
        channel.measure_power(batch)
