"""Kernel tests: tape gradients, parameter store, optimizer, cell."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intersad import nn
from intersad.errors import CheckpointError, ContractViolation, NumericError

from oracles import cell_step_oracle, encode_sequence_oracle


def make_store(rng, d_in=3, hidden=5, d_out=2):
    w1, b1 = nn.init_dense(rng, d_in, hidden)
    w2, b2 = nn.init_dense(rng, hidden, d_out)
    return nn.ParamStore({"W1": w1, "b1": b1, "W2": w2, "b2": b2})


# ---------------------------------------------------------------------------
# Var / ops


def test_ops_plain_numpy_passthrough():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([10.0, 20.0])
    assert isinstance(nn.add(a, b), np.ndarray)
    assert isinstance(nn.tanh(a), np.ndarray)
    np.testing.assert_array_equal(nn.add(a, b), a + b)


def test_logistic_midpoint_and_tails():
    assert nn.logistic(np.array(0.0)) == pytest.approx(0.5)
    assert nn.logistic(np.array(50.0)) == pytest.approx(1.0)
    assert nn.logistic(np.array(-50.0)) == pytest.approx(0.0)
    assert np.isfinite(nn.logistic(np.array([-1e3, 1e3]))).all()


def test_var_coerces_to_float64():
    v = nn.Var(np.ones(3, dtype=np.float32))
    assert v.value.dtype == np.float64


def test_additive_accumulation_when_input_reused():
    x = nn.Var(np.array([1.5, -2.0, 0.5]))
    loss = nn.asum(nn.mul(x, x))
    (g,) = nn.backward(loss, [x])
    np.testing.assert_allclose(g, 2.0 * x.value, rtol=0, atol=0)


def test_untouched_parameter_gets_exact_zero_gradient():
    rng = np.random.default_rng(0)
    store = make_store(rng)

    def loss_fn(p):
        return nn.asum(nn.mul(p["W1"], p["W1"]))

    grads = nn.grad(loss_fn, store)
    assert np.all(grads["W2"] == 0.0)
    assert np.all(grads["b2"] == 0.0)
    np.testing.assert_allclose(grads["W1"], 2.0 * store["W1"])


def test_backward_rejects_non_scalar_loss():
    x = nn.Var(np.ones(4))
    with pytest.raises(ContractViolation):
        nn.backward(nn.mul(x, 2.0), [x])


def test_backward_survives_long_chains():
    x = nn.Var(np.array(1.0))
    y = x
    for _ in range(5000):
        y = nn.mul(y, 0.9995)
    (g,) = nn.backward(y, [x])
    assert np.isfinite(g)


def test_matmul_vjp_shapes_vector_and_matrix():
    rng = np.random.default_rng(3)
    a = nn.Var(rng.normal(size=(4, 3)))
    b = nn.Var(rng.normal(size=(3,)))
    loss = nn.asum(nn.matmul(a, b))
    ga, gb = nn.backward(loss, [a, b])
    assert ga.shape == (4, 3) and gb.shape == (3,)


def test_concat_cols_splits_gradient():
    a = nn.Var(np.ones((2, 2)))
    b = nn.Var(np.ones((2, 3)))
    out = nn.concat_cols([a, b])
    loss = nn.asum(nn.mul(out, np.arange(10.0).reshape(2, 5)))
    ga, gb = nn.backward(loss, [a, b])
    np.testing.assert_array_equal(ga, [[0.0, 1.0], [5.0, 6.0]])
    np.testing.assert_array_equal(gb, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])


def test_sqrt_subgradient_zero_at_zero():
    x = nn.Var(np.array([0.0, 4.0]))
    loss = nn.asum(nn.sqrt(x))
    (g,) = nn.backward(loss, [x])
    np.testing.assert_allclose(g, [0.0, 0.25])


@settings(max_examples=20, deadline=None)
@given(
    rows=st.integers(min_value=1, max_value=4),
    cols=st.integers(min_value=1, max_value=4),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_composite_gradients_match_finite_differences(rows, cols, seed):
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(
        {"A": rng.normal(size=(rows, cols)), "b": rng.normal(size=cols)}
    )
    x = rng.normal(size=(2, rows))

    def loss_fn(p):
        y = nn.tanh(nn.add(nn.matmul(x, p["A"]), p["b"]))
        z = nn.logistic(nn.mul(y, y))
        return nn.asum(nn.sqrt(nn.add(nn.asum(z, axis=1), 1.0)))

    report = nn.finite_diff_check(loss_fn, store)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# ParamStore


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31))
def test_flat_roundtrip_is_bitwise_identity(seed):
    rng = np.random.default_rng(seed)
    store = make_store(rng)
    before = {n: a.copy() for n, a in store.params.items()}
    store.load_flat(store.flat())
    for name in before:
        np.testing.assert_array_equal(store[name], before[name])


def test_load_flat_rejects_wrong_length():
    store = make_store(np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        store.load_flat(np.zeros(store.size() + 1))


def test_json_roundtrip_identity_and_version_guard():
    store = make_store(np.random.default_rng(1))
    payload = store.to_json_dict()
    clone = nn.ParamStore.from_json_dict(payload)
    for name in store.names():
        np.testing.assert_array_equal(store[name], clone[name])
    bad = dict(payload)
    bad["format_version"] = 99
    with pytest.raises(CheckpointError):
        nn.ParamStore.from_json_dict(bad)
    truncated = dict(payload)
    truncated["flat_values"] = payload["flat_values"][:-3]
    with pytest.raises(CheckpointError):
        nn.ParamStore.from_json_dict(truncated)
    with pytest.raises(CheckpointError):
        nn.ParamStore.from_json_dict({"names": []})


def test_init_dense_bounds_and_zero_bias():
    rng = np.random.default_rng(7)
    w, b = nn.init_dense(rng, 16, 64)
    bound = (1.0 / 16) ** 0.5
    assert np.all(np.abs(w) <= bound)
    assert np.all(b == 0.0)
    w2, _ = nn.init_dense(np.random.default_rng(7), 16, 64)
    np.testing.assert_array_equal(w, w2)


# ---------------------------------------------------------------------------
# dense / recurrent layers


def test_dense_forward_identity_matches_manual():
    rng = np.random.default_rng(5)
    w, b = nn.init_dense(rng, 3, 2)
    b[:] = rng.normal(size=2)
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(nn.dense_forward(x, w, b), x @ w + b)


def test_dense_forward_unknown_activation():
    with pytest.raises(ContractViolation):
        nn.dense_forward(np.ones((1, 2)), np.ones((2, 2)), np.zeros(2), "relu")


def test_recurrent_zero_input_zero_state_stays_zero():
    rng = np.random.default_rng(11)
    params = nn.recurrent_cell_init(rng, d_in=3, hidden=4)
    steps = [np.zeros(3) for _ in range(6)]
    h = nn.recurrent_encode(steps, params)
    np.testing.assert_array_equal(h, np.zeros(4))


def test_recurrent_encode_matches_hand_oracle():
    rng = np.random.default_rng(12)
    params = nn.recurrent_cell_init(rng, d_in=3, hidden=4)
    steps = [rng.normal(size=3) for _ in range(4)]
    h = nn.recurrent_encode(steps, params)
    expected = encode_sequence_oracle(params, steps, hidden=4)
    np.testing.assert_allclose(h, expected, rtol=1e-12, atol=0)


def test_recurrent_cell_single_step_matches_oracle_with_nonzero_state():
    rng = np.random.default_rng(13)
    params = nn.recurrent_cell_init(rng, d_in=2, hidden=3)
    x, h = rng.normal(size=2), rng.normal(size=3)
    got = nn.recurrent_cell(params, x, h)
    np.testing.assert_allclose(got, cell_step_oracle(params, x, h), rtol=1e-12, atol=0)


def test_recurrent_encode_empty_sequence_rejected():
    params = nn.recurrent_cell_init(np.random.default_rng(0), d_in=2, hidden=3)
    with pytest.raises(ContractViolation):
        nn.recurrent_encode([], params)


def test_recurrent_gradients_pass_finite_differences():
    rng = np.random.default_rng(21)
    store = nn.ParamStore(nn.recurrent_cell_init(rng, d_in=2, hidden=3))
    steps = [rng.normal(size=(2, 2)) for _ in range(3)]

    def loss_fn(p):
        h = nn.recurrent_encode(steps, p)
        return nn.asum(nn.mul(h, h))

    report = nn.finite_diff_check(loss_fn, store)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_parameters_fixed():
    store = make_store(np.random.default_rng(2))
    before = store.flat()
    opt = nn.Adam(lr=0.1)
    zeros = {n: np.zeros_like(a) for n, a in store.params.items()}
    opt.step(store, zeros)
    opt.step(store, zeros)
    np.testing.assert_array_equal(store.flat(), before)


def test_adam_first_step_is_signed_lr():
    store = nn.ParamStore({"w": np.array([1.0, -1.0, 2.0])})
    opt = nn.Adam(lr=0.01)
    opt.step(store, {"w": np.array([0.5, -3.0, 1e-3])})
    delta = store["w"] - np.array([1.0, -1.0, 2.0])
    np.testing.assert_allclose(delta, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_rejects_non_finite_gradient():
    store = nn.ParamStore({"w": np.ones(2)})
    opt = nn.Adam(lr=0.01)
    with pytest.raises(NumericError, match="w"):
        opt.step(store, {"w": np.array([np.nan, 0.0])})


# ---------------------------------------------------------------------------
# finite_diff_check itself


def test_finite_diff_check_passes_tanh_network():
    rng = np.random.default_rng(42)
    store = make_store(rng)
    x = rng.normal(size=(5, 3))

    def loss_fn(p):
        h = nn.dense_forward(x, p["W1"], p["b1"], "tanh")
        y = nn.dense_forward(h, p["W2"], p["b2"], "identity")
        return nn.asum(nn.mul(y, y))

    report = nn.finite_diff_check(loss_fn, store)
    assert report.passed
    assert report.max_rel_err < 1e-4
    assert report.n_checked == store.size()


def test_finite_diff_check_flags_corrupted_gradient():
    rng = np.random.default_rng(43)
    store = make_store(rng)
    x = rng.normal(size=(5, 3))

    def loss_fn(p):
        h = nn.dense_forward(x, p["W1"], p["b1"], "tanh")
        y = nn.dense_forward(h, p["W2"], p["b2"], "identity")
        return nn.asum(nn.mul(y, y))

    grads = nn.grad(loss_fn, store)
    grads["W2"] = grads["W2"] * 1.10
    report = nn.finite_diff_check(loss_fn, store, grads=grads)
    assert not report.passed
    assert report.worst_param.startswith("W2[")
