import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feedback_code_toolkit import autodiff
from feedback_code_toolkit.exceptions import ContractError, DimensionError


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def total(x):
    return autodiff.scale(autodiff.mean_op(x), x.values.size)


def test_affine_identity():
    result = autodiff.affine(np.array([1.0, 2.0]), np.eye(2), np.zeros(2))
    assert np.array_equal(result.values, [1.0, 2.0])


def test_affine_direct_substitution():
    result = autodiff.affine(
        np.array([1.0, 1.0]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 0.0])
    )
    assert np.array_equal(result.values, [4.0, 7.0])


def test_affine_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as error:
        autodiff.affine(np.ones(3), np.ones((2, 2)))
    assert "(3,)" in str(error.value) and "(2, 2)" in str(error.value)


def test_affine_gradient_matches_finite_differences(rng):
    store = autodiff.ParameterStore()
    store.add("w", rng.normal(size=(2, 3)))
    store.add("b", rng.normal(size=2))
    x = rng.normal(size=3)
    error = autodiff.finite_diff_check(
        lambda s: total(autodiff.affine(x, s["w"], s["b"])), store
    )
    assert error < 1e-6


def test_elementwise_values():
    assert autodiff.tanh_op(np.array(0.0)).item() == 0.0
    assert autodiff.sigmoid_op(np.array(0.0)).item() == 0.5
    assert autodiff.relu_op(np.array(-3.0)).item() == 0.0


def test_relu_derivative_below_zero():
    store = autodiff.ParameterStore()
    store.add("x", [-3.0])
    with autodiff.Tape() as tape:
        loss = autodiff.mean_op(autodiff.relu_op(store["x"]))
    autodiff.backward(tape, loss, store)
    assert store.grad("x")[0] == 0.0


def test_softmax_equal_logits():
    assert np.allclose(autodiff.softmax_op(np.zeros(3)).values, 1 / 3)


def test_softmax_direct_substitution():
    assert np.allclose(autodiff.softmax_op(np.array([math.log(2), 0.0])).values, [2 / 3, 1 / 3])


@given(
    st.lists(st.floats(-50, 50), min_size=2, max_size=6),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance(logits, shift):
    logits = np.array(logits)
    assert np.allclose(
        autodiff.softmax_op(logits).values, autodiff.softmax_op(logits + shift).values, atol=1e-12
    )


def test_softmax_sums_to_one_for_large_logits(rng):
    probs = autodiff.softmax_op(rng.uniform(-1e3, 1e3, size=(100, 16))).values
    assert np.all(probs >= 0)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12


def test_cross_entropy_certain_prediction():
    assert autodiff.cross_entropy_op(np.array([1.0, 0.0]), 0).item() == 0.0


def test_cross_entropy_uniform():
    loss = autodiff.cross_entropy_op(np.full(4, 0.25), 3).item()
    assert loss == pytest.approx(math.log(4))
    assert loss == pytest.approx(1.3863, abs=1e-4)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        autodiff.cross_entropy_op(np.array([0.5, 0.5]), 2)


def test_cross_entropy_gradient_on_logits():
    store = autodiff.ParameterStore()
    store.add("z", [0.3, -1.2, 0.8, 0.1])
    with autodiff.Tape() as tape:
        probs = autodiff.softmax_op(store["z"])
        loss = autodiff.cross_entropy_op(probs, 1)
    autodiff.backward(tape, loss, store)
    expected = probs.values - np.eye(4)[1]
    assert np.allclose(store.grad("z"), expected, atol=1e-12)


def test_cross_entropy_softmax_affine_oracle(rng):
    store = autodiff.ParameterStore()
    store.add("w", rng.normal(size=(4, 3)))
    store.add("b", rng.normal(size=4))
    x = rng.normal(size=(5, 3))
    targets = np.array([0, 1, 2, 3, 1])

    def f(s):
        return autodiff.cross_entropy_op(
            autodiff.softmax_op(autodiff.affine(x, s["w"], s["b"])), targets
        )

    assert autodiff.finite_diff_check(f, store) < 1e-6


def test_gru_with_zero_params_halves_state():
    params = autodiff.GRUCellParams(
        *[
            autodiff.Tensor(np.zeros(shape))
            for shape in [(3, 2), (3, 3), (3,)] * 3
        ]
    )
    h = np.array([1.0, -2.0, 4.0])
    result = autodiff.gru_cell(np.array([0.7, -0.1]), h, params)
    assert np.allclose(result.values, 0.5 * h)


def test_gru_zero_fixed_point(rng):
    store = autodiff.ParameterStore()
    params = autodiff.add_gru(store, "g", 2, 3, rng)
    result = autodiff.gru_cell(np.zeros(2), np.zeros(3), params)
    assert np.array_equal(result.values, np.zeros(3))


def test_gru_dimension_mismatch(rng):
    store = autodiff.ParameterStore()
    params = autodiff.add_gru(store, "g", 2, 3, rng)
    with pytest.raises(DimensionError):
        autodiff.gru_cell(np.zeros(4), np.zeros(3), params)


def test_gru_backpropagation_through_time(rng):
    store = autodiff.ParameterStore()
    params = autodiff.add_gru(store, "g", 2, 3, rng)
    inputs = rng.normal(size=(5, 2, 2))

    def f(s):
        h = autodiff.constant(np.zeros((2, 3)))
        for u in inputs:
            h = autodiff.gru_cell(u, h, params)
        return autodiff.mean_op(h)

    assert autodiff.finite_diff_check(f, store) < 1e-5


def test_backward_square():
    store = autodiff.ParameterStore()
    store.add("x", [3.0])
    with autodiff.Tape() as tape:
        loss = autodiff.mean_op(autodiff.mul(store["x"], store["x"]))
    autodiff.backward(tape, loss, store)
    assert store.grad("x")[0] == pytest.approx(6.0)


def test_backward_unused_parameter_has_zero_gradient():
    store = autodiff.ParameterStore()
    store.add("x", [3.0])
    store.add("unused", [1.0, 2.0])
    with autodiff.Tape() as tape:
        loss = autodiff.mean_op(autodiff.mul(store["x"], store["x"]))
    autodiff.backward(tape, loss, store)
    assert np.array_equal(store.grad("unused"), [0.0, 0.0])


def test_backward_needs_scalar_seed():
    store = autodiff.ParameterStore()
    store.add("x", [1.0, 2.0])
    with autodiff.Tape() as tape:
        y = autodiff.tanh_op(store["x"])
    with pytest.raises(ContractError):
        autodiff.backward(tape, y, store)


def test_gradients_accumulate_across_uses(rng):
    store = autodiff.ParameterStore()
    store.add("x", rng.normal(size=4))

    def f(x):
        return autodiff.mean_op(autodiff.tanh_op(x))

    def g(x):
        return autodiff.mean_op(autodiff.mul(x, x))

    with autodiff.Tape() as tape:
        loss = autodiff.add(f(store["x"]), g(store["x"]))
    autodiff.backward(tape, loss, store)
    combined = store.grad("x").copy()

    separate = np.zeros(4)
    for fn in (f, g):
        store.zero_grad()
        with autodiff.Tape() as tape:
            loss = fn(store["x"])
        autodiff.backward(tape, loss, store)
        separate += store.grad("x")
    assert np.allclose(combined, separate, atol=1e-15)


def test_tape_replay_is_deterministic(rng):
    store = autodiff.ParameterStore()
    params = autodiff.add_gru(store, "g", 2, 4, rng)
    u = rng.normal(size=(3, 2))

    def run():
        store.zero_grad()
        with autodiff.Tape() as tape:
            h = autodiff.gru_cell(u, np.zeros((3, 4)), params)
            loss = autodiff.mean_op(h)
        autodiff.backward(tape, loss, store)
        return h.values.copy(), {name: store.grad(name).copy() for name in store}

    first_out, first_grads = run()
    second_out, second_grads = run()
    assert np.array_equal(first_out, second_out)
    assert all(np.array_equal(first_grads[name], second_grads[name]) for name in store)


def test_finite_diff_exact_for_quadratics():
    store = autodiff.ParameterStore()
    store.add("x", [0.5, -1.2, 2.0])
    assert autodiff.finite_diff_check(lambda s: total(autodiff.mul(s["x"], s["x"])), store) < 1e-9


def test_finite_diff_tanh_chain(rng):
    store = autodiff.ParameterStore()
    store.add("x", rng.normal(size=3))

    def f(s):
        y = s["x"]
        for _ in range(10):
            y = autodiff.tanh_op(autodiff.scale(y, 1.5))
        return autodiff.mean_op(y)

    assert autodiff.finite_diff_check(f, store, h=1e-5) < 1e-5


def test_finite_diff_restores_values(rng):
    store = autodiff.ParameterStore()
    values = rng.normal(size=3)
    store.add("x", values)
    autodiff.finite_diff_check(lambda s: autodiff.mean_op(autodiff.tanh_op(s["x"])), store)
    assert np.array_equal(store["x"].values, values)


def test_finite_diff_needs_positive_step():
    store = autodiff.ParameterStore()
    store.add("x", [1.0])
    with pytest.raises(ContractError):
        autodiff.finite_diff_check(lambda s: autodiff.mean_op(s["x"]), store, h=0.0)


def test_batch_standardize_and_normalized_weight_gradients(rng):
    store = autodiff.ParameterStore()
    store.add("x", rng.normal(size=6))
    store.add("v", rng.uniform(0.5, 2.0, size=3))
    weights = rng.normal(size=6)

    def f(s):
        normalized = autodiff.batch_standardize(s["x"], 1e-8)
        scaled = autodiff.normalized_weight_mul(normalized, s["v"], 1)
        return autodiff.mean_op(autodiff.mul(scaled, autodiff.constant(weights)))

    assert autodiff.finite_diff_check(f, store) < 1e-6


def test_concat_stack_select_weighted_sum_gradients(rng):
    store = autodiff.ParameterStore()
    store.add("a", rng.normal(size=(2, 3)))
    store.add("b", rng.normal(size=(2, 3)))
    store.add("alpha", rng.normal(size=2))

    def f(s):
        joined = autodiff.concat([s["a"], s["b"]])
        stacked = autodiff.stack([autodiff.select(joined, 0), autodiff.select(joined, 4)])
        pooled = autodiff.weighted_sum([s["a"], s["b"]], s["alpha"])
        return autodiff.add(
            autodiff.mean_op(autodiff.tanh_op(stacked)), autodiff.mean_op(autodiff.tanh_op(pooled))
        )

    assert autodiff.finite_diff_check(f, store) < 1e-6


def test_mul_only_broadcasts_scalars():
    with pytest.raises(DimensionError):
        autodiff.mul(np.ones(3), np.ones(2))
    assert np.array_equal(autodiff.mul(np.ones(3), np.array(2.0)).values, [2.0, 2.0, 2.0])


def test_parameter_store_rejects_duplicates():
    store = autodiff.ParameterStore()
    store.add("x", [1.0])
    with pytest.raises(ContractError):
        store.add("x", [2.0])


def test_parameter_store_gradient_shapes(rng):
    store = autodiff.ParameterStore()
    autodiff.add_affine(store, "layer", 3, 2, rng)
    for name, tensor in store.items():
        assert store.grad(name).shape == tensor.shape
    assert store.num_parameters == 8
    assert np.array_equal(store["layer.bias"].values, np.zeros(2))
    assert np.all(np.abs(store["layer.weight"].values) <= 1 / math.sqrt(3))


@settings(max_examples=25)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5))
def test_parameter_store_state_dict_roundtrip(values):
    store = autodiff.ParameterStore()
    store.add("x", values)
    other = autodiff.ParameterStore()
    other.add("x", np.zeros(len(values)))
    other.load_state_dict(store.state_dict())
    assert np.array_equal(other["x"].values, store["x"].values)
