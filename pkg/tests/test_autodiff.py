import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfpg import autodiff as ad
from helpers import central_difference, max_relative_error


def _grad_check(build, params, tol=1e-6):
    """Compare backward() against central differences for ``loss = build(nodes)``."""
    nodes = ad.parameters(params)
    analytic = ad.backward(build(nodes))
    numeric = central_difference(lambda p: build(ad.parameters(p)).item(), params)
    return max_relative_error(analytic, numeric)


@pytest.mark.parametrize("op", [
    lambda n: ad.reduce_sum(ad.tanh(n["a"])),
    lambda n: ad.reduce_sum(ad.exp(n["a"])),
    lambda n: ad.reduce_sum(ad.square(n["a"])),
    lambda n: ad.reduce_sum(ad.mul(n["a"], n["b"])),
    lambda n: ad.reduce_sum(ad.sub(n["a"], ad.neg(n["b"]))),
    lambda n: ad.mean(ad.matmul(n["a"], ad.reshape(n["b"], (4, 3)))),
    lambda n: ad.reduce_sum(ad.columns(ad.log_softmax(n["a"]), 1, 3)),
    lambda n: ad.reduce_sum(ad.take(ad.log_softmax(n["a"]), [0, 3, 2])),
    lambda n: ad.reduce_sum(ad.clip(n["a"], -0.5, 0.5)),
    lambda n: ad.reduce_sum(ad.reduce_sum(n["a"], axis=1)),
    lambda n: ad.reduce_sum(ad.add(n["a"], ad.reduce_sum(n["b"], axis=0))),
    lambda n: ad.reduce_sum(ad.log(ad.add(ad.square(n["a"]), 1.0))),
])
def test_primitive_gradients(op):
    rng = np.random.default_rng(1)
    params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}
    assert _grad_check(op, params) < 1e-5


def test_matrix_vector_product_gradient():
    rng = np.random.default_rng(2)
    params = {"m": rng.standard_normal((3, 5)), "v": rng.standard_normal(5)}
    assert _grad_check(lambda n: ad.reduce_sum(ad.tanh(ad.matmul(n["m"], n["v"]))), params) < 1e-6


def test_log_softmax_rows_normalise():
    z = ad.log_softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]]))
    assert np.allclose(np.exp(z.value).sum(axis=1), 1.0)
    assert np.all(np.isfinite(z.value))


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(1, 5), min_size=2, max_size=4), rows=st.integers(1, 6),
       seed=st.integers(0, 2**31 - 1))
def test_mlp_gradient_matches_finite_differences(sizes, rows, seed):
    rng = np.random.default_rng(seed)
    params = ad.init_mlp(sizes, rng)
    x = rng.standard_normal((rows, sizes[0]))
    w = rng.standard_normal((rows, sizes[-1]))
    err = _grad_check(lambda n: ad.reduce_sum(ad.mul(ad.mlp_forward(n, x), w)), params)
    assert err < 1e-4


def test_dense_backward_blocks_match_single_pass():
    # more rows than one block, so the blocked accumulation is exercised
    rng = np.random.default_rng(3)
    params = ad.init_mlp([2, 5, 1], rng)
    x = rng.standard_normal((2500, 2))
    w = rng.standard_normal(2500)
    grads = ad.backward(ad.reduce_sum(ad.mul(ad.reshape(ad.mlp_forward(ad.parameters(params), x), (2500,)), w)))
    h = np.tanh(x @ params["W0"] + params["b0"])
    g_out = w[:, None]
    g_h = (g_out @ params["W1"].T) * (1 - h * h)
    assert np.allclose(grads["W1"], h.T @ g_out, rtol=1e-10, atol=1e-10)
    assert np.allclose(grads["W0"], x.T @ g_h, rtol=1e-10, atol=1e-10)
    assert np.allclose(grads["b0"], g_h.sum(axis=0), rtol=1e-10, atol=1e-10)


def test_mlp_apply_matches_graph_forward_and_cache():
    rng = np.random.default_rng(4)
    params = ad.init_mlp([3, 8, 8, 2], rng)
    x = rng.standard_normal((5000, 3))
    plain = ad.mlp_apply(params, x)
    out, layers = ad.mlp_apply(params, x, record=True)
    graph = ad.mlp_forward(ad.parameters(params), x)
    assert np.allclose(plain, graph.value, rtol=0, atol=1e-12)
    assert np.array_equal(out, graph.value)
    cached = ad.mlp_forward(ad.parameters(params), x, cache=layers)
    assert np.array_equal(cached.value, graph.value)


def test_fan_in_mismatch_is_a_contract_error():
    params = ad.init_mlp([3, 4, 1], np.random.default_rng(0))
    with pytest.raises(ad.ContractError):
        ad.mlp_apply(params, np.zeros((2, 5)))
    with pytest.raises(ad.ContractError):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_log_of_non_positive_value_raises():
    with pytest.raises(ad.ContractError):
        ad.log(np.array([1.0, 0.0]))


def test_backward_twice_raises():
    a = ad.leaf(np.array([1.0, 2.0]), "a")
    loss = ad.reduce_sum(ad.square(a))
    assert np.allclose(ad.backward(loss)["a"], [2.0, 4.0])
    with pytest.raises(ad.GraphConsumedError):
        ad.backward(loss)


def test_backward_needs_scalar():
    with pytest.raises(ad.ContractError):
        ad.backward(ad.square(ad.leaf(np.ones(3), "a")))


def test_shared_leaf_accumulates():
    a = ad.leaf(np.array(3.0), "a")
    grads = ad.backward(ad.add(ad.mul(a, a), a))
    assert grads["a"] == pytest.approx(7.0)


def test_constants_receive_no_gradient():
    a = ad.leaf(np.ones(2), "a")
    grads = ad.backward(ad.reduce_sum(ad.mul(a, ad.constant(np.array([2.0, 5.0])))))
    assert list(grads) == ["a"]


# ----------------------------------------------------------------- Adam


def _adam_oracle(p, g, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_matches_scalar_oracle():
    params = {"w": np.array([0.5])}
    state = ad.adam_init(params)
    for _ in range(3):
        params, state = ad.adam_step(params, {"w": np.array([0.2])}, state, 0.01)
    assert params["w"][0] == pytest.approx(_adam_oracle(0.5, 0.2, 0.01, 3), abs=1e-15)
    assert state.step == 3


def test_adam_first_step_moves_by_learning_rate():
    # bias correction makes the first step size lr * sign(g), up to eps
    params = {"w": np.array([1.0, -1.0])}
    new, _ = ad.adam_step(params, {"w": np.array([3.0, -0.01])}, ad.adam_init(params), 1e-3)
    assert np.allclose(new["w"] - params["w"], [-1e-3, 1e-3], atol=1e-9)


def test_adam_clips_by_global_norm():
    params = {"a": np.zeros(2), "b": np.zeros(1)}
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert ad.global_norm(grads) == pytest.approx(5.0)
    state = ad.adam_init(params)
    _, clipped = ad.adam_step(params, grads, state, 1e-3, max_grad_norm=1.0)
    # the first moment holds (1 - beta1) * scaled gradient
    assert np.allclose(clipped.m["a"], 0.1 * np.array([0.6, 0.0]))
    assert np.allclose(clipped.m["b"], 0.1 * np.array([0.8]))
    _, unclipped = ad.adam_step(params, grads, state, 1e-3, max_grad_norm=10.0)
    assert np.allclose(unclipped.m["a"], 0.1 * grads["a"])


def test_adam_leaves_inputs_untouched():
    params = {"w": np.array([1.0])}
    state = ad.adam_init(params)
    ad.adam_step(params, {"w": np.array([1.0])}, state, 0.1)
    assert params["w"][0] == 1.0 and state.step == 0 and state.m["w"][0] == 0.0


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_adam_rejects_non_finite_gradient(bad):
    params = {"w": np.zeros(2)}
    with pytest.raises(ad.NonFiniteGradientError):
        ad.adam_step(params, {"w": np.array([0.0, bad])}, ad.adam_init(params), 0.1)


def test_adam_rejects_non_positive_learning_rate():
    params = {"w": np.zeros(1)}
    with pytest.raises(ad.ContractError):
        ad.adam_step(params, {"w": np.zeros(1)}, ad.adam_init(params), 0.0)


def test_float32_parameters_stay_float32():
    params = ad.init_mlp([2, 4, 1], np.random.default_rng(0), np.float32)
    grads = ad.backward(ad.reduce_sum(ad.mlp_forward(ad.parameters(params), np.ones((3, 2)))))
    new, _ = ad.adam_step(params, grads, ad.adam_init(params), 1e-3)
    assert all(v.dtype == np.float32 for v in new.values())


# ------------------------------------------------------- worked examples


def test_zero_weights_give_zero_output():
    params = {k: np.zeros_like(v) for k, v in ad.init_mlp([3, 4, 2], np.random.default_rng(0)).items()}
    assert np.array_equal(ad.mlp_apply(params, np.array([1.0, -2.0, 3.0])), np.zeros((1, 2)))


def test_identity_single_layer_is_identity():
    params = {"W0": np.eye(3), "b0": np.zeros(3)}
    x = np.array([[0.3, -1.5, 2.0]])
    assert np.array_equal(ad.mlp_forward(ad.parameters(params), x).value, x)


def test_two_four_one_net_matches_hand_evaluation():
    rng = np.random.default_rng(7)
    p = ad.init_mlp([2, 4, 1], rng)
    x0, x1 = 0.3, -0.8
    hidden = [math.tanh(x0 * p["W0"][0, j] + x1 * p["W0"][1, j] + p["b0"][j]) for j in range(4)]
    expected = sum(hidden[j] * p["W1"][j, 0] for j in range(4)) + p["b1"][0]
    assert ad.mlp_forward(ad.parameters(p), np.array([x0, x1])).item() == pytest.approx(expected, abs=1e-15)


def test_two_four_one_gradient_per_coordinate():
    rng = np.random.default_rng(8)
    params = ad.init_mlp([2, 4, 1], rng)
    x = rng.standard_normal((1, 2))
    assert _grad_check(lambda n: ad.reduce_sum(ad.mlp_forward(n, x)), params) < 1e-4


def test_init_is_uniform_fan_in_with_zero_bias():
    p = ad.init_mlp([16, 8, 1], np.random.default_rng(0))
    assert np.all(np.abs(p["W0"]) <= 1 / 4) and np.all(p["b0"] == 0)
    assert np.all(np.abs(p["W1"]) <= 1 / math.sqrt(8))


def test_sum_of_parameters_has_unit_gradient():
    params = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.0, 2.0])}
    nodes = ad.parameters(params)
    grads = ad.backward(ad.add(ad.reduce_sum(nodes["a"]), ad.reduce_sum(nodes["b"])))
    assert np.array_equal(grads["a"], np.ones((2, 3))) and np.array_equal(grads["b"], np.ones(2))


def test_square_at_three_has_gradient_six():
    assert ad.backward(ad.square(ad.leaf(np.array(3.0), "w")))["w"] == 6.0


def test_forward_is_deterministic():
    params = ad.init_mlp([3, 5, 2], np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((4, 3))
    assert np.array_equal(ad.mlp_apply(params, x), ad.mlp_apply(params, x))


def test_adam_zero_gradient_leaves_parameters():
    params = {"w": np.array([0.25, -4.0])}
    new, state = ad.adam_step(params, {"w": np.zeros(2)}, ad.adam_init(params), 0.1)
    assert np.array_equal(new["w"], params["w"]) and state.step == 1


def test_adam_norm_ten_gradient_is_applied_at_norm_one():
    params = {"w": np.zeros(2)}
    _, state = ad.adam_step(params, {"w": np.array([6.0, 8.0])}, ad.adam_init(params), 0.1,
                            max_grad_norm=1.0)
    applied = state.m["w"] / 0.1
    assert np.linalg.norm(applied) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(g=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=6),
       clip=st.floats(1e-3, 10.0))
def test_applied_gradient_never_exceeds_clip(g, clip):
    g = np.array(g)
    params = {"w": np.zeros_like(g)}
    _, state = ad.adam_step(params, {"w": g}, ad.adam_init(params), 0.1, max_grad_norm=clip)
    assert np.linalg.norm(state.m["w"] / 0.1) <= clip * (1 + 1e-12)


# ------------------------------------------------------- random graphs

_UNARY = {
    "tanh": ad.tanh,
    "exp": lambda h: ad.exp(ad.tanh(h)),
    "log": lambda h: ad.log(ad.add(ad.square(h), 1.0)),
    "square": ad.square,
}


def random_graph(ops, width):
    """A scalar loss built from ``ops`` applied to leaves ``a``, ``b`` and matrix ``m``."""
    def build(n):
        h = n["a"]
        for op in ops:
            if op == "add":
                h = ad.add(h, n["b"])
            elif op == "mul":
                h = ad.mul(h, n["b"])
            elif op == "affine":
                h = ad.add(ad.matmul(n["m"], h), n["b"])
            else:
                h = _UNARY[op](h)
        return ad.reduce_sum(h)
    return build


@settings(max_examples=100, deadline=None)
@given(ops=st.lists(st.sampled_from(["add", "mul", "affine", *_UNARY]), min_size=1, max_size=8),
       width=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_random_primitive_graphs_match_finite_differences(ops, width, seed):
    rng = np.random.default_rng(seed)
    params = {"a": rng.uniform(-1, 1, width), "b": rng.uniform(-1, 1, width),
              "m": rng.uniform(-1, 1, (width, width)) / width}
    assert _grad_check(random_graph(ops, width), params) < 1e-4
