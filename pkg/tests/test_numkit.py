import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from retrolab import numkit as nk


# --- mlp_forward -------------------------------------------------------------

def test_mlp_zero_weights_give_zero():
    layers = [(np.zeros((3, 4)), np.zeros(4), "relu"), (np.zeros((4, 2)), np.zeros(2), "tanh")]
    out = nk.mlp_forward(np.array([1.0, -2.0, 3.0]), layers)
    assert np.array_equal(out.value, np.zeros(2))


def test_mlp_identity_layer_is_identity():
    x = np.array([0.5, -1.5, 2.0])
    out = nk.mlp_forward(x, [(np.eye(3), np.zeros(3), "identity")])
    assert np.array_equal(out.value, x)


def test_mlp_relu_hand_value():
    # relu(1*(-3) + 1*2 + 0) = relu(-1) = 0
    out = nk.mlp_forward(np.array([-3.0, 2.0]), [(np.array([[1.0], [1.0]]), np.zeros(1), "relu")])
    assert out.value.tolist() == [0.0]


def test_mlp_batched_leading_axes():
    rng = np.random.default_rng(0)
    w, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    x = rng.normal(size=(4, 5, 3))
    out = nk.mlp_forward(x, [(w, b, "tanh")])
    assert out.shape == (4, 5, 2)
    np.testing.assert_allclose(out.value, np.tanh(x @ w + b))


@pytest.mark.parametrize("layers", [
    [(np.zeros((3, 4)), np.zeros(4), "relu")],
    [(np.zeros((2, 4)), np.zeros(3), "relu")],
    [(np.zeros((2, 4)), np.zeros(4), "sigmoid")],
])
def test_mlp_configuration_errors(layers):
    with pytest.raises(nk.ConfigurationError):
        nk.mlp_forward(np.zeros(2), layers)


# --- attention -----------------------------------------------------------------

def test_attention_single_key_returns_value():
    q = np.array([[0.3, -2.0]])
    out = nk.scaled_dot_attention(q, np.array([[1.0, 4.0]]), np.array([[7.0, 8.0, 9.0]]))
    np.testing.assert_allclose(out.value, [[7.0, 8.0, 9.0]])


def test_attention_identical_keys_average_values():
    keys = np.array([[1.0, 2.0], [1.0, 2.0]])
    vals = np.array([[1.0, 0.0], [3.0, 4.0]])
    for q in ([[5.0, -1.0]], [[-3.0, 0.2]]):
        out = nk.scaled_dot_attention(np.array(q), keys, vals)
        np.testing.assert_allclose(out.value, [[2.0, 2.0]], rtol=0, atol=1e-15)


def test_attention_hand_softmax():
    out = nk.scaled_dot_attention(np.array([[1.0]]), np.array([[1.0], [-1.0]]), np.array([[1.0], [0.0]]))
    expected = math.exp(1) / (math.exp(1) + math.exp(-1))
    assert out.value[0, 0] == pytest.approx(expected, abs=1e-12)
    assert out.value[0, 0] == pytest.approx(0.8808, abs=5e-5)


def test_attention_mask_excludes_keys():
    keys = np.array([[1.0], [-1.0]])
    vals = np.array([[1.0], [0.0]])
    out = nk.scaled_dot_attention(np.array([[1.0]]), keys, vals, key_mask=np.array([False, True]))
    assert out.value[0, 0] == 0.0


def test_attention_all_masked_is_empty_context():
    with pytest.raises(nk.EmptyContextError):
        nk.scaled_dot_attention(np.ones((1, 2)), np.ones((3, 2)), np.ones((3, 2)),
                                key_mask=np.zeros(3, dtype=bool))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_attention_rows_stay_in_value_envelope(n, m, dv, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(n, 3)) * 3, rng.normal(size=(m, 3)) * 3
    v = rng.normal(size=(m, dv))
    mask = rng.random(m) < 0.7
    mask[rng.integers(m)] = True
    out = nk.scaled_dot_attention(q, k, v, key_mask=mask).value
    lo, hi = v[mask].min(axis=0), v[mask].max(axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_multi_head_matches_single_head_when_one_head():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4))
    w = [rng.normal(size=(4, 4)) for _ in range(3)]
    one = nk.multi_head_attention(x, x, *w, heads=1).value
    ref = nk.scaled_dot_attention(x @ w[0], x @ w[1], x @ w[2]).value
    np.testing.assert_array_equal(one, ref)
    two = nk.multi_head_attention(x, x, *w, heads=2)
    assert two.shape == (2, 3, 4)


# --- positional encoding -----------------------------------------------------

def test_pe_row_zero_alternates():
    pe = nk.sinusoidal_positional_encoding(3, 6)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]


def test_pe_hand_values():
    pe = nk.sinusoidal_positional_encoding(2, 4)
    np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)],
                               rtol=0, atol=1e-15)


def test_pe_empty_and_odd():
    assert nk.sinusoidal_positional_encoding(0, 4).shape == (0, 4)
    with pytest.raises(nk.ConfigurationError):
        nk.sinusoidal_positional_encoding(3, 5)


@given(st.integers(0, 40), st.integers(1, 16))
def test_pe_bounded_and_deterministic(length, half):
    a = nk.sinusoidal_positional_encoding(length, 2 * half)
    b = nk.sinusoidal_positional_encoding(length, 2 * half)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 1.0)


# --- tape and gradient check -------------------------------------------------

def test_grad_check_linear_sum():
    err = nk.grad_check(lambda p: nk.sum(p["x"]), {"x": np.array([0.3, -1.0, 2.0])})
    assert err < 1e-9


def test_sum_of_squares_gradient():
    x = nk.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with nk.Tape() as tape:
        loss = nk.sum(nk.square(x))
    (g,) = tape.gradient(loss, [x])
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)
    assert nk.grad_check(lambda p: nk.sum(nk.square(p["x"])), {"x": np.array([1.0, 2.0])}) < 1e-6


def test_non_participating_parameter_gets_zero_gradient():
    a = nk.Tensor(np.ones(3), requires_grad=True)
    b = nk.Tensor(np.ones(2), requires_grad=True)
    with nk.Tape() as tape:
        loss = nk.sum(nk.mul(a, 3.0))
    ga, gb = tape.gradient(loss, [a, b])
    assert ga.tolist() == [3.0, 3.0, 3.0]
    assert gb.tolist() == [0.0, 0.0]


def test_no_tape_records_nothing():
    a = nk.Tensor(np.ones(2), requires_grad=True)
    out = nk.add(a, 1.0)
    assert not out.requires_grad


def test_grad_check_non_finite_loss():
    with pytest.raises(nk.NumericError):
        nk.grad_check(lambda p: nk.sum(nk.mul(p["x"], np.inf)), {"x": np.ones(2)})


def _composite_loss(p):
    x = np.linspace(-1, 1, 12).reshape(2, 3, 2)
    h = nk.mlp_forward(x, [(p["w0"], p["b0"], "tanh"), (p["w1"], p["b1"], "relu")])
    att = nk.multi_head_attention(h, h, p["q"], p["k"], p["v"], heads=2)
    flat = nk.reshape(att, (2, 12))
    logits = nk.matmul(flat, p["out"])
    lsm = nk.log_softmax(logits, axis=-1)
    sm = nk.softmax(logits, axis=-1)
    cat = nk.concat([lsm, sm], axis=-1)
    return nk.add(nk.mean(nk.square(cat)), nk.sum(nk.sqrt(nk.add(nk.square(flat), 1.0))))


def test_composite_graph_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    params = {"w0": rng.normal(size=(2, 5)), "b0": rng.normal(size=5) * 0.1,
              "w1": rng.normal(size=(5, 4)), "b1": rng.normal(size=4) * 0.1 + 0.3,
              "q": rng.normal(size=(4, 4)), "k": rng.normal(size=(4, 4)), "v": rng.normal(size=(4, 4)),
              "out": rng.normal(size=(12, 3))}
    assert nk.grad_check(_composite_loss, params) < 1e-6


# --- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = nk.adam_step(p, {"w": np.zeros(2)}, nk.AdamState(lr=0.1))
    assert np.array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_is_lr():
    new, _ = nk.adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, nk.AdamState(lr=0.1))
    assert new["w"][0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_repeated_steps_are_monotone():
    p, state = {"w": np.array([1.0])}, nk.AdamState(lr=0.05)
    p1, state = nk.adam_step(p, {"w": np.array([0.5])}, state)
    p2, state = nk.adam_step(p1, {"w": np.array([0.5])}, state)
    assert p2["w"][0] < p1["w"][0] < p["w"][0]
    assert state.step == 2
    assert state.m["w"].shape == p["w"].shape


def test_adam_shape_mismatch():
    with pytest.raises(nk.ConfigurationError):
        nk.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nk.AdamState())


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_forward_is_bit_reproducible(x):
    rng = np.random.default_rng(0)
    layers = [(rng.normal(size=(4, 6)), rng.normal(size=6), "relu"), (rng.normal(size=(6, 2)), np.zeros(2), "tanh")]
    assert np.array_equal(nk.mlp_forward(x, layers).value, nk.mlp_forward(x, layers).value)
