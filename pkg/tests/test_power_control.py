import numpy as np
import pytest

from feedback_code_toolkit import autodiff, power_control
from feedback_code_toolkit.autodiff import constant
from feedback_code_toolkit.exceptions import ContractError, UninitializedStatisticsError
from feedback_code_toolkit.power_control import Mode, PowerControl


@pytest.fixture
def layer():
    return PowerControl(autodiff.ParameterStore(), "enc.power", 4)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_standardizes_small_batch(layer):
    out = power_control.normalize_batch(constant(np.array([1.0, 2.0, 3.0])), layer, 0)
    assert np.allclose(out.values, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_standardized_batch_is_unchanged(layer):
    out = power_control.normalize_batch(constant(np.array([-1.0, 1.0])), layer, 0)
    assert np.allclose(out.values, [-1.0, 1.0], atol=1e-7)


def test_large_batch_has_zero_mean_and_unit_variance(layer, rng):
    out = power_control.normalize_batch(constant(rng.normal(3.0, 5.0, 10_000)), layer, 1).values
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-9


def test_initial_weights_are_unity(layer):
    assert np.allclose(layer.weights(), np.ones(4))
    x = constant(np.array([0.5, -0.5]))
    assert np.allclose(power_control.apply_weight(x, layer, 2).values, x.values)


def test_weights_are_renormalized():
    store = autodiff.ParameterStore()
    layer = PowerControl(store, "p", 2)
    store["p.v"].values[...] = [3.0, 4.0]
    weights = layer.weights()
    assert np.allclose(weights, [0.8485, 1.1314], atol=1e-4)
    assert abs(np.sum(weights**2) - 2.0) < 1e-12


def test_weights_ignore_scale_of_v():
    store = autodiff.ParameterStore()
    layer = PowerControl(store, "p", 3)
    store["p.v"].values[...] = [1.0, 2.0, 0.5]
    before = layer.weights()
    store["p.v"].values[...] *= 7.3
    assert np.allclose(layer.weights(), before, atol=1e-14)


def test_weight_gradient_matches_finite_differences(rng):
    store = autodiff.ParameterStore()
    layer = PowerControl(store, "p", 3)
    store["p.v"].values[...] = rng.uniform(0.5, 2.0, 3)
    batches = [constant(rng.normal(size=5)) for _ in range(3)]
    targets = [constant(rng.normal(size=5)) for _ in range(3)]

    def f(s):
        terms = [
            autodiff.mean_op(autodiff.mul(power_control.apply_weight(x, layer, t), target))
            for t, (x, target) in enumerate(zip(batches, targets))
        ]
        return autodiff.add_n(terms)

    assert autodiff.finite_diff_check(f, store) < 1e-6


def test_inference_needs_statistics(layer):
    with layer.inference_mode():
        with pytest.raises(UninitializedStatisticsError):
            power_control.normalize_batch(constant(np.ones(3)), layer, 0)


def test_freeze_needs_every_channel_use(layer):
    power_control.normalize_batch(constant(np.array([1.0, 2.0])), layer, 0)
    with pytest.raises(UninitializedStatisticsError):
        power_control.freeze_statistics(layer)


def test_training_needs_two_samples(layer):
    with pytest.raises(ContractError):
        power_control.normalize_batch(constant(np.array([1.0])), layer, 0)


def test_channel_use_out_of_range(layer):
    with pytest.raises(ContractError):
        power_control.normalize_batch(constant(np.array([1.0, 2.0])), layer, 4)


def test_running_statistics_track_the_data(rng):
    layer = PowerControl(autodiff.ParameterStore(), "p", 1)
    for _ in range(50):
        power_control.normalize_batch(constant(rng.normal(0.0, 1.0, 1000)), layer, 0)
    assert abs(layer.running_mean[0]) < 0.05
    assert abs(layer.running_var[0] - 1.0) < 0.05


def test_first_observation_sets_statistics(layer):
    power_control.normalize_batch(constant(np.array([1.0, 3.0])), layer, 0)
    assert layer.running_mean[0] == 2.0
    assert layer.running_var[0] == 1.0
    power_control.normalize_batch(constant(np.array([3.0, 5.0])), layer, 0)
    assert layer.running_mean[0] == pytest.approx(2.2)


def test_frozen_statistics_do_not_move(layer):
    power_control.normalize_batch(constant(np.array([1.0, 3.0])), layer, 0)
    with layer.statistics_frozen():
        power_control.normalize_batch(constant(np.array([10.0, 30.0])), layer, 0)
    assert layer.running_mean[0] == 2.0
    assert layer.update_statistics


def test_observe_follows_the_exponential_average(layer):
    layer.observe(np.array([1.0, 3.0]), 2)
    layer.observe(np.array([3.0, 5.0]), 2)
    assert layer.running_mean[2] == pytest.approx(2.2)
    assert layer.running_var[2] == pytest.approx(1.0)
    assert layer.observed[2] and not layer.observed[0]


def test_calibration_averages_its_batches(layer):
    for _ in range(5):
        layer.observe(np.array([100.0, 300.0]), 0)
    with layer.inference_mode():
        with layer.calibrating():
            assert layer.mode is Mode.TRAIN
            power_control.normalize_batch(constant(np.array([1.0, 3.0])), layer, 0)
            power_control.normalize_batch(constant(np.array([3.0, 7.0])), layer, 0)
        assert layer.mode is Mode.INFERENCE
    assert layer.running_mean[0] == pytest.approx(3.5)
    assert layer.running_var[0] == pytest.approx(2.5)
    layer.observe(np.array([3.5, 3.5]), 0)
    assert layer.running_mean[0] == pytest.approx(3.5)
    assert layer.running_var[0] == pytest.approx(2.25)


def test_calibration_overrides_frozen_updates(layer):
    with layer.statistics_frozen():
        with layer.calibrating():
            power_control.normalize_batch(constant(np.array([0.0, 4.0])), layer, 1)
        assert not layer.update_statistics
    assert (layer.running_mean[1], layer.running_var[1]) == (2.0, 4.0)

def test_inference_is_deterministic(rng):
    layer = PowerControl(autodiff.ParameterStore(), "p", 2)
    for t in range(2):
        power_control.normalize_batch(constant(rng.normal(1.0, 2.0, 100)), layer, t)
    power_control.freeze_statistics(layer)
    assert layer.mode is Mode.INFERENCE
    batch = constant(rng.normal(size=20))
    first = power_control.normalize_batch(batch, layer, 1).values
    second = power_control.normalize_batch(batch, layer, 1).values
    assert np.array_equal(first, second)


def test_train_and_inference_agree_on_large_batches(rng):
    layer = PowerControl(autodiff.ParameterStore(), "p", 1)
    power_control.normalize_batch(constant(rng.normal(2.0, 3.0, 1_000_000)), layer, 0)
    batch = constant(rng.normal(2.0, 3.0, 1_000_000))
    trained = power_control.normalize_batch(batch, layer, 0).values
    with layer.inference_mode():
        inferred = power_control.normalize_batch(batch, layer, 0).values
    assert np.max(np.abs(trained - inferred)) < 0.02


def test_state_dict_roundtrip(layer, rng):
    for t in range(4):
        power_control.normalize_batch(constant(rng.normal(size=10)), layer, t)
    power_control.freeze_statistics(layer)
    other = PowerControl(autodiff.ParameterStore(), "enc.power", 4)
    other.load_state_dict(layer.state_dict())
    assert np.array_equal(other.running_mean, layer.running_mean)
    assert np.array_equal(other.running_var, layer.running_var)
    assert other.observed.all()
    assert other.mode is Mode.INFERENCE
