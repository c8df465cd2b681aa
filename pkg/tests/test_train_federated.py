import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feedback_code_toolkit import autodiff, train_federated, train_global
from feedback_code_toolkit.autodiff import constant
from feedback_code_toolkit.channel import ChannelConfig
from feedback_code_toolkit.evaluation import run_bler_eval
from feedback_code_toolkit.exceptions import CheckpointMismatchError, ConfigError, DimensionError
from feedback_code_toolkit.light_bc import LightBC, LightConfig
from feedback_code_toolkit.train_federated import FederatedConfig, PartyLedger
from feedback_code_toolkit.train_global import TrainConfig, TrainingState, desk_defaults


def small_light(seed=0):
    return LightBC(LightConfig(2, 2, 4, 8, 8, 8, 8), seed)


@pytest.fixture
def config():
    return TrainConfig(
        batch_size=32,
        epochs=1,
        total_samples=64,
        learning_rate=1e-2,
        optimizer="adamw",
        weight_decay=0.01,
        audit_batch=256,
    )


@pytest.fixture
def channel():
    return ChannelConfig(2, 4, 0.5, 0.0, seed=8)


def test_noiseless_uplink_returns_outputs():
    p = constant(np.full((3, 4), 0.25))
    assert np.array_equal(train_federated.transmit_decoder_output(p, np.zeros((3, 4))).values, p.values)


def test_uplink_noise_variance():
    rng = np.random.default_rng(0)
    p = constant(np.full((100_000, 10), 0.1))
    out = train_federated.transmit_decoder_output(p, rng.normal(0.0, 0.5, size=(100_000, 10)))
    assert np.var(out.values - p.values) == pytest.approx(0.25, rel=0.01)


def test_uplink_rejects_wrong_noise_shape():
    with pytest.raises(DimensionError):
        train_federated.transmit_decoder_output(constant(np.ones((2, 4))), np.zeros((2, 3)))


def test_gradient_flows_through_the_noisy_uplink():
    rng = np.random.default_rng(1)
    store = autodiff.ParameterStore()
    store.add("logits", rng.normal(size=(3, 4)))
    noise = 0.01 * rng.normal(size=(3, 4))
    targets = np.array([0, 2, 3])

    def f(s):
        p = autodiff.softmax_op(s["logits"])
        return autodiff.cross_entropy_op(train_federated.transmit_decoder_output(p, noise), targets)

    assert autodiff.finite_diff_check(f, store) < 1e-6


def test_gradient_power_scale_examples():
    assert train_federated.compute_gradient_power_scale(np.ones(4)) == 1.0
    assert train_federated.compute_gradient_power_scale(np.array([3.0, 4.0])) == pytest.approx(2 / 25)
    assert train_federated.compute_gradient_power_scale(np.zeros(5)) == 1.0
    assert train_federated.compute_gradient_power_scale(np.ones(4), n_grad=8) == 2.0


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20).filter(lambda g: any(abs(x) > 1e-3 for x in g)))
def test_scaled_gradient_carries_unit_power_per_entry(values):
    grad = np.array(values)
    scaled = math.sqrt(train_federated.compute_gradient_power_scale(grad)) * grad
    assert np.sum(scaled**2) == pytest.approx(grad.size, abs=1e-9 * grad.size)


def test_noiseless_downlink_is_exact():
    grad = np.array([0.1, -3.0, 2.5])
    received = train_federated.transmit_gradients(grad, 0.3, None)
    assert np.array_equal(received, grad)
    assert received is not grad


def test_noisy_downlink_needs_a_generator():
    with pytest.raises(ValueError):
        train_federated.transmit_gradients(np.ones(3), 1.0, 10.0)


def test_downlink_snr():
    rng = np.random.default_rng(2)
    grad = rng.normal(0.0, 0.01, size=1_000_000)
    p_grad = train_federated.compute_gradient_power_scale(grad)
    received = train_federated.transmit_gradients(grad, p_grad, 5.0, np.random.default_rng(3))
    noise_power = np.mean(((received - grad) * math.sqrt(p_grad)) ** 2)
    signal_power = np.mean((math.sqrt(p_grad) * grad) ** 2)
    assert 10 * math.log10(signal_power / noise_power) == pytest.approx(5.0, abs=0.1)


def test_federated_config_output_variance(channel):
    noisy = ChannelConfig(2, 4, 0.5, 0.04)
    assert FederatedConfig().output_variance(noisy) == 0.04
    assert FederatedConfig(output_noise_var=0.2).output_variance(noisy) == 0.2
    with pytest.raises(ConfigError):
        FederatedConfig(output_noise_var=-1.0)


def test_federated_config_from_dict(config):
    fed = FederatedConfig.from_dict({"grad_snr_db": 10.0, "power_scaling": False}, config)
    assert fed.base is config
    assert fed.grad_snr_db == 10.0 and not fed.power_scaling
    assert FederatedConfig.from_dict(fed.to_dict(), config) == fed
    with pytest.raises(ConfigError):
        FederatedConfig.from_dict({"base": {}}, config)


def test_noiseless_links_reproduce_global_training(config, channel):
    global_model, federated_model = small_light(seed=5), small_light(seed=5)
    state = TrainingState.start(global_model, config)
    fed = FederatedConfig(base=config)
    ledger = PartyLedger.create(federated_model, config)
    for batch in range(3):
        global_result = train_global.train_batch(
            global_model, channel, config, state.optimizer, 1e-2, batch
        )
        federated_result, _ = train_federated.federated_train_batch(
            federated_model, channel, fed, ledger, 1e-2, batch
        )
        assert federated_result.loss == pytest.approx(global_result.loss, abs=1e-12)
    for name in global_model.store:
        difference = np.max(np.abs(global_model.store[name].values - federated_model.store[name].values))
        assert difference < 1e-12
    assert all(ledger.divergence(federated_model, user) == 0.0 for user in range(2))


def test_noisy_downlink_makes_local_copies_diverge(config, channel):
    model = small_light()
    fed = FederatedConfig(base=config, grad_snr_db=10.0)
    ledger = PartyLedger.create(model, config)
    records = []
    for batch in range(2):
        _, batch_records = train_federated.federated_train_batch(model, channel, fed, ledger, 1e-2, batch)
        records.extend(batch_records)
    assert all(ledger.divergence(model, user) > 0 for user in range(2))
    assert all(record.received_error_norm > 0 for record in records)
    assert records[-1].divergence == ledger.divergence(model, 1)


def test_encoder_parameters_ignore_downlink_noise(config, channel):
    clean, noisy = small_light(seed=1), small_light(seed=1)
    clean_ledger = PartyLedger.create(clean, config)
    noisy_ledger = PartyLedger.create(noisy, config)
    train_federated.federated_train_batch(clean, channel, FederatedConfig(base=config), clean_ledger, 1e-2, 0)
    train_federated.federated_train_batch(
        noisy, channel, FederatedConfig(base=config, grad_snr_db=0.0), noisy_ledger, 1e-2, 0
    )
    for name in clean.encoder_names():
        assert np.array_equal(clean.store[name].values, noisy.store[name].values)
    for name, values in clean_ledger.replicas.items():
        assert np.array_equal(values, noisy_ledger.replicas[name])


def test_transfer_noise_log(tmp_path, config):
    channel = ChannelConfig(2, 4, 0.5, 0.01, seed=2)
    path = tmp_path / "transfer.csv"
    model = small_light()
    fed = FederatedConfig(base=replace(config, audit_batch=50_000), grad_snr_db=20.0)
    records = train_federated.federated_train(model, channel, fed, log_path=path)
    assert len(records) == 1
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(train_federated.TransferNoiseRecord.HEADER)
    assert len(lines) == 1 + config.batches_per_epoch * 2
    assert records[0].power == pytest.approx(4.0, rel=train_global.POWER_TOLERANCE)
    assert train_global.power_audit(model, channel, fed.base, 9) == pytest.approx(
        4.0, rel=train_global.POWER_TOLERANCE
    )


def test_resumed_federated_run_matches_an_uninterrupted_one(tmp_path, config):
    channel = ChannelConfig(2, 4, 0.5, 0.01, seed=2)
    fed = FederatedConfig(base=replace(config, epochs=2, total_samples=128), grad_snr_db=15.0)
    straight = small_light(seed=3)
    straight_state = train_federated.FederatedTrainingState.start(straight, fed)
    train_federated.federated_train(straight, channel, fed, straight_state)

    interrupted = small_light(seed=3)
    state = train_federated.FederatedTrainingState.start(interrupted, fed)
    train_federated.federated_train_epoch(interrupted, channel, fed, state)
    path = tmp_path / "partial.npz"
    train_global.checkpoint_save(interrupted, path, state=state)

    resumed = train_global.checkpoint_load(path)
    restored = train_federated.load_federated_state(path, resumed)
    assert (restored.epoch, restored.batches_done) == (1, fed.base.batches_per_epoch)
    log = tmp_path / "transfer.csv"
    log.write_text(",".join(train_federated.TransferNoiseRecord.HEADER) + "\n")
    train_federated.federated_train(resumed, channel, fed, restored, log, append=True)

    for name in straight.store:
        assert np.array_equal(resumed.store[name].values, straight.store[name].values)
    for name, values in straight_state.ledger.replicas.items():
        assert np.array_equal(restored.ledger.replicas[name], values)
    assert restored.ledger.encoder_state.step == straight_state.ledger.encoder_state.step
    lines = log.read_text().splitlines()
    assert lines.count(lines[0]) == 1
    assert len(lines) == 1 + fed.base.batches_per_epoch * 2


def test_training_states_are_not_interchangeable(tmp_path, config, channel):
    model = small_light()
    federated_path, global_path = tmp_path / "federated.npz", tmp_path / "global.npz"
    fed = FederatedConfig(base=config)
    train_global.checkpoint_save(
        model, federated_path, state=train_federated.FederatedTrainingState.start(model, fed)
    )
    train_global.checkpoint_save(model, global_path, state=TrainingState.start(model, config))
    with pytest.raises(CheckpointMismatchError):
        train_global.checkpoint_load_optimizer(federated_path, model)
    with pytest.raises(CheckpointMismatchError):
        train_federated.load_federated_state(global_path, model)
    train_global.checkpoint_save(model, global_path)
    assert train_federated.load_federated_state(global_path, model) is None


@pytest.mark.slow
def test_cleaner_downlink_trains_better():
    channel = ChannelConfig.from_db(2, 9, 2.0, None, seed=11)
    wins = 0
    for seed in range(5):
        bler = {}
        for snr in (40.0, 10.0):
            model = LightBC(LightConfig(2, 2, 9, fe_hidden=32), seed=seed)
            fed = FederatedConfig(base=replace(desk_defaults("light_bc"), seed=seed), grad_snr_db=snr)
            train_federated.federated_train(model, channel, fed)
            bler[snr] = run_bler_eval(model, channel, 100_000, 100_000).average_bler
        wins += bler[10.0] >= bler[40.0]
    assert wins >= 3
