import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symran.errors import NumericError
from symran.nets import (
    AdamState,
    FeedForwardNet,
    Layer,
    finite_diff_check,
    softmax,
    softmax_kl,
    train_step,
)


def test_zero_sigmoid_layer_outputs_half():
    net = FeedForwardNet([Layer(np.zeros((3, 4)), np.zeros(3), "sigmoid")])
    out = net.forward(np.array([0.3, -2.0, 5.0, 0.0]))
    assert np.array_equal(out, np.full(3, 0.5))


def test_identity_layer_passes_input_through():
    net = FeedForwardNet([Layer(np.eye(4), np.zeros(4), "identity")])
    x = np.array([1.0, -2.5, 0.0, 3.25])
    assert np.array_equal(net.forward(x), x)


def test_forward_deterministic_across_runs():
    rng = np.random.default_rng(42)
    net = FeedForwardNet.create([5, 8, 2], ["tanh", "identity"], rng)
    x = np.random.default_rng(1).normal(size=5)
    a = net.forward(x)
    b = net.forward(x)
    assert np.array_equal(a, b)
    net2 = FeedForwardNet.create([5, 8, 2], ["tanh", "identity"],
                                 np.random.default_rng(42))
    assert np.array_equal(net2.forward(x), a)


def test_forward_rejects_dim_mismatch():
    net = FeedForwardNet.create([4, 2], ["identity"], np.random.default_rng(0))
    with pytest.raises(ValueError):
        net.forward(np.zeros(5))


def test_layer_dims_must_chain():
    with pytest.raises(ValueError):
        FeedForwardNet([
            Layer(np.zeros((3, 4)), np.zeros(3), "tanh"),
            Layer(np.zeros((2, 5)), np.zeros(2), "identity"),
        ])


def test_train_step_quadratic_converges():
    # 1-D linear net on a least-squares problem whose optimum is exact
    net = FeedForwardNet.create([1, 1], ["identity"], np.random.default_rng(3))
    opt = AdamState.for_size(net.param_count, lr=0.1)
    x = np.array([[2.0]])
    y = np.array([[3.0]])
    loss = None
    for _ in range(200):
        pred, cache = net.forward_cached(x)
        resid = pred - y
        loss = float(np.mean(resid**2))
        train_step(net, opt, cache, 2.0 * resid / resid.size, loss)
    assert loss < 1e-6


def test_train_step_zero_gradient_keeps_params():
    net = FeedForwardNet.create([2, 2], ["identity"], np.random.default_rng(0))
    opt = AdamState.for_size(net.param_count, lr=0.5)
    before = net.get_params()
    _, cache = net.forward_cached(np.array([1.0, 2.0]))
    train_step(net, opt, cache, np.zeros(2), 0.0)
    assert np.array_equal(net.get_params(), before)
    assert opt.step_count == 1  # bias-correction bookkeeping still advances


def test_train_step_zero_lr_keeps_params():
    net = FeedForwardNet.create([2, 2], ["tanh"], np.random.default_rng(0))
    opt = AdamState.for_size(net.param_count, lr=0.0)
    before = net.get_params()
    out, cache = net.forward_cached(np.array([1.0, 2.0]))
    train_step(net, opt, cache, np.ones_like(out), 1.0)
    assert np.array_equal(net.get_params(), before)


def test_train_step_rejects_non_finite_gradient():
    net = FeedForwardNet.create([2, 2], ["identity"], np.random.default_rng(0))
    opt = AdamState.for_size(net.param_count, lr=0.1)
    before = net.get_params()
    _, cache = net.forward_cached(np.array([1.0, 2.0]))
    with pytest.raises(NumericError):
        train_step(net, opt, cache, np.array([np.nan, 1.0]), 1.0)
    assert np.array_equal(net.get_params(), before)


def test_finite_diff_quadratic():
    def f(p):
        return float(p[0] ** 2)

    err = finite_diff_check(f, np.array([3.0]), np.array([6.0]))
    assert err <= 1e-7


def test_finite_diff_constant_function():
    def f(p):
        return 1.5

    err = finite_diff_check(f, np.array([0.3, -1.0]), np.zeros(2))
    assert err == 0.0


def test_finite_diff_two_layer_sigmoid_mse():
    rng = np.random.default_rng(7)
    net = FeedForwardNet.create([3, 6, 2], ["sigmoid", "sigmoid"], rng)
    x = rng.normal(size=(10, 3))
    y = rng.uniform(size=(10, 2))

    def f(p):
        net.set_params(p)
        return float(np.mean((net.forward(x) - y) ** 2))

    p0 = net.get_params()
    pred, cache = net.forward_cached(x)
    grads, _ = net.backward(cache, 2.0 * (pred - y) / pred.size)
    analytic = net.flatten_grads(grads)
    err = finite_diff_check(f, p0, analytic)
    assert err < 1e-4


def test_gradient_integrity_at_random_points():
    # repo invariant: analytic gradients beat 1e-4 at 10 random points
    rng = np.random.default_rng(11)
    net = FeedForwardNet.create([4, 8, 3], ["tanh", "identity"], rng)
    x = rng.normal(size=(8, 4))
    y = rng.normal(size=(8, 3))

    def f(p):
        net.set_params(p)
        return float(np.mean((net.forward(x) - y) ** 2))

    for _ in range(10):
        p0 = rng.normal(0.0, 0.5, size=net.param_count)
        net.set_params(p0)
        pred, cache = net.forward_cached(x)
        grads, _ = net.backward(cache, 2.0 * (pred - y) / pred.size)
        assert finite_diff_check(f, p0, net.flatten_grads(grads)) < 1e-4


def test_softmax_kl_identical_logits_is_zero():
    x = np.array([0.5, -1.0, 2.0])
    assert softmax_kl(x, x, 1.0) == 0.0
    assert softmax_kl(x, x, 7.3) == 0.0


def test_softmax_kl_hand_value():
    val = softmax_kl(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0)
    assert val == pytest.approx(0.46212, abs=1e-5)


def test_softmax_kl_rejects_bad_args():
    with pytest.raises(ValueError):
        softmax_kl(np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        softmax_kl(np.zeros(2), np.zeros(3), 1.0)


@given(
    logits=st.lists(st.floats(-30, 30), min_size=2, max_size=6),
    shift=st.floats(-50, 50),
    kappa=st.floats(0.1, 10.0),
)
@settings(max_examples=80, deadline=None)
def test_softmax_kl_shift_invariance(logits, shift, kappa):
    p = np.array(logits)
    q = np.linspace(-1.0, 1.0, len(logits))
    base = softmax_kl(p, q, kappa)
    shifted = softmax_kl(p + shift, q, kappa)
    assert shifted == pytest.approx(base, abs=1e-9)
    assert softmax_kl(p, q + shift, kappa) == pytest.approx(base, abs=1e-9)


@given(logits=st.lists(st.floats(-20, 20), min_size=2, max_size=5))
@settings(max_examples=60, deadline=None)
def test_softmax_kl_nonnegative(logits):
    p = np.array(logits)
    q = p[::-1].copy()
    assert softmax_kl(p, q, 2.0) >= 0.0


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(0).normal(size=(4, 5)) * 10
    s = softmax(z)
    assert np.allclose(s.sum(axis=1), 1.0)


def test_net_json_round_trip():
    rng = np.random.default_rng(5)
    net = FeedForwardNet.create([3, 7, 2], ["relu", "sigmoid"], rng)
    restored = FeedForwardNet.from_json(net.to_json())
    x = rng.normal(size=3)
    assert np.array_equal(net.forward(x), restored.forward(x))
    blob = json.loads(net.to_json())
    assert blob["format"] == "symran-net"
    with pytest.raises(ValueError):
        FeedForwardNet.from_dict({"format": "other", "version": 1, "layers": []})
