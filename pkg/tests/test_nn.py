import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hrdyn.exceptions import (
    GradientCheckError,
    InputError,
    NonFiniteLossError,
    ParseError,
    PoisonedUpdateError,
    ShapeError,
)
from hrdyn.nn import (
    LSTM,
    BatchNorm1d,
    Conv1d,
    EarlyStopping,
    Linear,
    MaxPool1d,
    OptimizerState,
    ReduceLROnPlateau,
    ReLU,
    adam_step,
    batchnorm1d_forward,
    conv1d_forward,
    conv1d_output_length,
    grad_check,
    linear_forward,
    load_checkpoint,
    lstm_forward,
    mae_loss,
    maxpool1d_backward,
    maxpool1d_forward,
    plateau_scheduler,
    relu_forward,
    save_checkpoint,
)


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def naive_conv(x, kernels, bias, stride):
    n, c_in, length = x.shape
    c_out, _, k = kernels.shape
    l_out = (length - k) // stride + 1
    y = np.zeros((n, c_out, l_out))
    for a in range(n):
        for o in range(c_out):
            for t in range(l_out):
                acc = bias[o]
                for c in range(c_in):
                    for j in range(k):
                        acc += x[a, c, t * stride + j] * kernels[o, c, j]
                y[a, o, t] = acc
    return y


def naive_lstm(x, W_ih, W_hh, b, h0, c0):
    """Scalar-loop LSTM cell, gate order input, forget, candidate, output."""
    n, length, _ = x.shape
    H = W_hh.shape[1]
    h, c = h0.copy(), c0.copy()
    out = np.zeros((n, length, H))
    for a in range(n):
        for t in range(length):
            z = W_ih @ x[a, t] + W_hh @ h[a] + b
            i = np.array([sigmoid(v) for v in z[:H]])
            f = np.array([sigmoid(v) for v in z[H:2 * H]])
            g = np.tanh(z[2 * H:3 * H])
            o = np.array([sigmoid(v) for v in z[3 * H:]])
            c[a] = f * c[a] + i * g
            h[a] = o * np.tanh(c[a])
            out[a, t] = h[a]
    return out, h, c


# ---------------------------------------------------------------- forward examples


def test_linear_examples():
    np.testing.assert_array_equal(linear_forward([[1.0, 2.0]], np.eye(2), np.zeros(2)), [[1, 2]])
    np.testing.assert_array_equal(linear_forward([[1.0, 2.0]], np.array([[1.0, 1.0]]), np.array([1.0])), [[4]])
    assert not linear_forward(np.ones((3, 2)), np.zeros((4, 2)), np.zeros(4)).any()


def test_linear_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
        linear_forward(np.ones((1, 3)), np.eye(2), np.zeros(2))


def test_conv_examples():
    x = np.array([[[1.0, 2.0, 3.0]]])
    y, _ = conv1d_forward(x, np.array([[[1.0, 1.0]]]), np.zeros(1))
    np.testing.assert_array_equal(y, [[[3, 5]]])
    y, _ = conv1d_forward(x, np.array([[[1.0]]]), np.zeros(1))
    np.testing.assert_array_equal(y, x)
    y, _ = conv1d_forward(x, np.zeros((1, 1, 2)), np.zeros(1))
    assert not y.any()


def test_conv_too_short():
    with pytest.raises(ShapeError):
        conv1d_forward(np.ones((1, 1, 2)), np.ones((1, 1, 3)), np.zeros(1))


@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 5), st.integers(1, 3), st.integers(0, 6))
def test_conv_matches_naive_loops(seed, n, c_in, c_out, k, stride, extra):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c_in, k + extra))
    kern, bias = r.standard_normal((c_out, c_in, k)), r.standard_normal(c_out)
    y, _ = conv1d_forward(x, kern, bias, stride)
    np.testing.assert_allclose(y, naive_conv(x, kern, bias, stride), atol=1e-12)


def test_batchnorm_examples():
    y, _ = batchnorm1d_forward(np.array([[[1.0, 3.0]]]), np.ones(1), np.zeros(1),
                               np.zeros(1), np.ones(1), train=True)
    # var 1 plus eps 1e-5: 1 / sqrt(1.00001)
    np.testing.assert_allclose(y.ravel(), [-0.999995, 0.999995], atol=1e-7)
    y, _ = batchnorm1d_forward(np.array([[[1.0, 3.0]]]), np.zeros(1), np.full(1, 0.7),
                               np.zeros(1), np.ones(1), train=True)
    np.testing.assert_array_equal(y.ravel(), [0.7, 0.7])
    x = np.random.default_rng(0).standard_normal((2, 3, 5))
    y, _ = batchnorm1d_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3),
                               train=False, eps=0.0)
    np.testing.assert_array_equal(y, x)


def test_batchnorm_running_stats():
    bn = BatchNorm1d(1)
    bn.forward(np.array([[[1.0, 3.0]]]), train=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.2)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * 2.0)


def test_batchnorm_train_needs_two_values():
    with pytest.raises(InputError):
        BatchNorm1d(1).forward(np.ones((1, 1, 1)), train=True)


def test_relu_and_maxpool_examples():
    np.testing.assert_array_equal(relu_forward(np.array([-1.0, 2.0])), [0, 2])
    np.testing.assert_array_equal(maxpool1d_forward(np.array([[[1.0, 3, 2, 4]]]))[0], [[[3, 4]]])
    np.testing.assert_array_equal(maxpool1d_forward(np.array([[[1.0, 3, 2, 4, 9]]]))[0], [[[3, 4]]])


@pytest.mark.parametrize("pool", [2, 3])
def test_maxpool_ties_route_to_first(pool):
    x = np.ones((1, 1, pool))
    y, arg = maxpool1d_forward(x, pool)
    dx = maxpool1d_backward(np.ones_like(y), x.shape, arg, pool)
    assert dx.ravel().tolist() == [1.0] + [0.0] * (pool - 1)


def test_lstm_examples():
    n, length, n_in, H = 2, 4, 3, 5
    x = np.random.default_rng(1).standard_normal((n, length, n_in))
    zeros = np.zeros((n, H))
    h_seq, _, _, _ = lstm_forward(x, np.zeros((4 * H, n_in)), np.zeros((4 * H, H)),
                                  np.zeros(4 * H), zeros, zeros)
    assert h_seq.shape == (n, length, H) and not h_seq.any()
    # sigmoid(10) leaks about 4.5e-5 of |c| per step
    b = np.zeros(4 * H)
    b[H:2 * H] = 10.0
    c0 = np.random.default_rng(2).uniform(-1, 1, (n, H))
    _, _, c_last, _ = lstm_forward(x[:, :2], np.zeros((4 * H, n_in)), np.zeros((4 * H, H)), b, zeros, c0)
    np.testing.assert_allclose(c_last, c0, rtol=0, atol=1e-4)


@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 5), st.integers(1, 3), st.integers(1, 4))
def test_lstm_matches_naive_cell(seed, n, length, n_in, H):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, length, n_in))
    W_ih, W_hh, b = r.standard_normal((4 * H, n_in)), r.standard_normal((4 * H, H)), r.standard_normal(4 * H)
    h0, c0 = r.standard_normal((n, H)), r.standard_normal((n, H))
    h_seq, h, c, _ = lstm_forward(x, W_ih, W_hh, b, h0, c0)
    e_seq, e_h, e_c = naive_lstm(x, W_ih, W_hh, b, h0, c0)
    np.testing.assert_allclose(h_seq, e_seq, atol=1e-12)
    np.testing.assert_allclose(h, e_h, atol=1e-12)
    np.testing.assert_allclose(c, e_c, atol=1e-12)


def test_lstm_shape_error():
    with pytest.raises(ShapeError):
        lstm_forward(np.ones((2, 3, 4)), np.ones((8, 4)), np.ones((8, 2)), np.ones(8),
                     np.zeros((3, 2)), np.zeros((2, 2)))


@given(st.integers(1, 4), st.integers(1, 64), st.integers(1, 9), st.integers(1, 4), st.integers(2, 4))
def test_output_shapes_closed_form(n, length, k, stride, pool):
    r = np.random.default_rng(0)
    if length < k:
        return
    y, _ = conv1d_forward(r.standard_normal((n, 2, length)), r.standard_normal((3, 2, k)), np.zeros(3), stride)
    assert y.shape == (n, 3, (length - k) // stride + 1) == (n, 3, conv1d_output_length(length, k, stride))
    if length >= pool:
        assert maxpool1d_forward(np.zeros((n, 2, length)), pool)[0].shape == (n, 2, length // pool)


def test_mae_examples():
    loss, g = mae_loss([72.0], [75.0])
    assert loss == 3.0 and g.tolist() == [-1.0]
    loss, g = mae_loss([70.0, 80.0], [72.0, 76.0])
    assert loss == 3.0 and g.tolist() == [-0.5, 0.5]
    loss, g = mae_loss([1.0, 2.0], [1.0, 2.0])
    assert loss == 0.0 and not g.any()
    with pytest.raises(InputError):
        mae_loss([], [])


# ---------------------------------------------------------------- gradient checks


def layer_fn(layer, x, train=True, kind="plain"):
    """Smooth scalar loss sum(R * layer(x)) with grads for params and the input."""
    r = np.random.default_rng(99)
    out_shape = None

    def fn(params, inputs):
        nonlocal out_shape
        for name in layer.params:
            layer.params[name][...] = params[name]
        layer.zero_grad()
        xin = params["__x"]
        if kind == "lstm":
            h0, c0 = params["__h0"], params["__c0"]
            h_seq, h, c = layer.forward(xin, h0, c0, train=train)
            R = np.random.default_rng(7).standard_normal(h_seq.shape)
            Rh = np.random.default_rng(8).standard_normal(h.shape)
            Rc = np.random.default_rng(9).standard_normal(c.shape)
            loss = float((R * h_seq).sum() + (Rh * h).sum() + (Rc * c).sum())
            dx, dh0, dc0 = layer.backward(R, Rh, Rc)
            grads = dict(layer.grads, __x=dx, __h0=dh0, __c0=dc0)
        else:
            y = layer.forward(xin, train=train)
            R = np.random.default_rng(7).standard_normal(y.shape)
            loss = float((R * y).sum())
            grads = dict(layer.grads, __x=layer.backward(R))
        return loss, {k: np.array(v) for k, v in grads.items()}

    params = {k: v.copy() for k, v in layer.params.items()}
    params["__x"] = x
    if kind == "lstm":
        params["__h0"] = r.standard_normal((x.shape[0], layer.hidden))
        params["__c0"] = r.standard_normal((x.shape[0], layer.hidden))
    return fn, params


def _jitter(layer, seed):
    r = np.random.default_rng(seed)
    for p in layer.params.values():
        p += 0.3 * r.standard_normal(p.shape)


@given(st.integers(0, 2**31))
def test_gradcheck_linear(seed):
    r = np.random.default_rng(seed)
    layer = Linear(int(r.integers(1, 5)), int(r.integers(1, 5)), r)
    _jitter(layer, seed)
    fn, params = layer_fn(layer, r.standard_normal((int(r.integers(1, 4)), layer.params["weight"].shape[1])))
    assert grad_check(fn, params, None) < 1e-4


@given(st.integers(0, 2**31))
def test_gradcheck_conv(seed):
    r = np.random.default_rng(seed)
    c_in, c_out, k, stride = (int(v) for v in r.integers(1, 4, size=4))
    layer = Conv1d(c_in, c_out, k, r, stride=stride)
    _jitter(layer, seed)
    fn, params = layer_fn(layer, r.standard_normal((2, c_in, k + int(r.integers(0, 8)))))
    assert grad_check(fn, params, None) < 1e-4


@given(st.integers(0, 2**31), st.booleans())
def test_gradcheck_batchnorm(seed, train):
    r = np.random.default_rng(seed)
    layer = BatchNorm1d(int(r.integers(1, 4)))
    _jitter(layer, seed)
    c = layer.params["gamma"].shape[0]
    fn, params = layer_fn(layer, r.standard_normal((3, c, 4)), train=train)
    # train mode updates running buffers, which do not affect train-mode outputs
    assert grad_check(fn, params, None) < 1e-4


@given(st.integers(0, 2**31))
def test_gradcheck_relu_and_maxpool(seed):
    r = np.random.default_rng(seed)
    for layer in (ReLU(), MaxPool1d(2), MaxPool1d(3)):
        fn, params = layer_fn(layer, r.standard_normal((2, 2, 7)))
        assert grad_check(fn, params, None) < 1e-4


@given(st.integers(0, 2**31))
def test_gradcheck_lstm(seed):
    r = np.random.default_rng(seed)
    n_in, H = int(r.integers(1, 4)), int(r.integers(1, 4))
    layer = LSTM(n_in, H, r)
    _jitter(layer, seed)
    fn, params = layer_fn(layer, r.standard_normal((2, int(r.integers(1, 5)), n_in)), kind="lstm")
    assert grad_check(fn, params, None) < 1e-4


def _linear_mae_fn():
    r = np.random.default_rng(3)
    x, t = r.standard_normal((6, 3)), r.standard_normal(6)

    def fn(params, _inputs, scale=1.0):
        pred = linear_forward(x, params["W"], params["b"]).ravel()
        loss, g = mae_loss(pred, t)
        g = g[:, None]
        return loss, {"W": scale * g.T @ x, "b": scale * g.sum(axis=0)}
    return fn, {"W": r.standard_normal((1, 3)), "b": r.standard_normal(1)}


def test_gradcheck_linear_mae_tight():
    fn, params = _linear_mae_fn()
    assert grad_check(fn, params, None) < 1e-6


def test_gradcheck_detects_corrupted_backward():
    fn, params = _linear_mae_fn()
    assert grad_check(lambda p, i: fn(p, i, scale=1.1), params, None) > 1e-2
    with pytest.raises(GradientCheckError):
        grad_check(lambda p, i: fn(p, i, scale=1.1), params, None, tolerance=1e-4)


def test_gradcheck_non_finite_loss():
    with pytest.raises(NonFiniteLossError):
        grad_check(lambda p, i: (float("nan"), {"a": np.zeros(1)}), {"a": np.zeros(1)}, None)


def test_gradcheck_skips_kinks():
    # |a| at a = 0 has no derivative
    fn = lambda p, i: (float(abs(p["a"][0])), {"a": np.sign(p["a"])})  # noqa: E731
    worst, info = grad_check(fn, {"a": np.zeros(1)}, None, return_details=True)
    assert info == {"probed": 1, "skipped_kinks": 1} and worst == 0.0


def test_gradcheck_restores_params():
    fn, params = _linear_mae_fn()
    before = {k: v.copy() for k, v in params.items()}
    grad_check(fn, params, None)
    for k in params:
        assert np.array_equal(params[k], before[k])


# ---------------------------------------------------------------- optimizer


def test_adam_first_step():
    p = {"w": np.zeros(1)}
    adam_step(p, {"w": np.ones(1)}, OptimizerState(lr=5e-4))
    assert p["w"][0] == pytest.approx(-5e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient():
    p = {"w": np.array([0.3, -1.2])}
    state = OptimizerState(lr=1e-2)
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, state)
    assert p["w"].tolist() == [0.3, -1.2] and state.step == 5


def test_adam_symmetric_updates():
    p = {"a": np.array([1.0]), "b": np.array([1.0])}
    state = OptimizerState(lr=1e-2, weight_decay=1e-3)
    for g in (0.5, -0.2, 1.5):
        adam_step(p, {"a": np.array([g]), "b": np.array([g])}, state)
    assert p["a"][0] == p["b"][0]


def test_adam_weight_decay_is_l2_on_gradient():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.zeros(1)}, OptimizerState(lr=1e-3, weight_decay=0.5))
    # g = 0 + 0.5 * 2 = 1 so the first step is again -lr
    assert p["w"][0] == pytest.approx(2.0 - 1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_poisoned_update_leaves_params():
    p = {"a": np.ones(2), "b": np.ones(2)}
    state = OptimizerState()
    with pytest.raises(PoisonedUpdateError):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state)
    assert p["a"].tolist() == [1, 1] and state.step == 0


@given(st.integers(0, 2**31), st.permutations(["a", "b", "c"]))
def test_adam_permutation_equivariant(seed, order):
    r = np.random.default_rng(seed)
    shapes = {"a": (2,), "b": (3, 2), "c": (1,)}
    base = {k: r.standard_normal(s) for k, s in shapes.items()}
    grads = [{k: r.standard_normal(s) for k, s in shapes.items()} for _ in range(3)]
    p1 = {k: base[k].copy() for k in shapes}
    p2 = {k: base[k].copy() for k in order}
    s1, s2 = OptimizerState(lr=1e-2), OptimizerState(lr=1e-2)
    for g in grads:
        adam_step(p1, g, s1)
        adam_step(p2, {k: g[k] for k in order}, s2)
    for k in shapes:
        assert p1[k].shape == shapes[k]
        assert np.array_equal(p1[k], p2[k])


def test_optimizer_state_round_trip():
    p = {"w": np.array([0.5, 1.5])}
    state = OptimizerState(lr=1e-3, weight_decay=1e-6)
    adam_step(p, {"w": np.array([0.1, -0.3])}, state)
    back = OptimizerState.from_dict(json.loads(json.dumps(state.to_dict())))
    assert back.step == 1 and np.array_equal(back.m["w"], state.m["w"])


def test_plateau_reduces_on_tenth_stagnant_epoch():
    assert plateau_scheduler([1.0] + [0.99] + [0.99] * 9, 5e-4) == pytest.approx(5e-4)
    assert plateau_scheduler([1.0, 0.99] + [0.99] * 10, 5e-4) == pytest.approx(5e-5)


def test_plateau_monotone_and_reset():
    assert plateau_scheduler(list(np.linspace(1, 0, 50)), 5e-4) == 5e-4
    hist = [1.0] + [1.0] * 8 + [0.5] + [0.5] * 8
    assert plateau_scheduler(hist, 5e-4) == 5e-4


def test_plateau_counter_resets_after_reduction():
    sched = ReduceLROnPlateau(1.0, patience=2)
    lrs = [sched.step(v) for v in [1.0, 1.0, 1.0, 1.0, 1.0]]
    assert lrs == [1.0, 1.0, 0.1, 0.1, pytest.approx(0.01)]


def test_early_stopping():
    es = EarlyStopping(patience=3)
    flags = [es.step(v, i) for i, v in enumerate([3.0, 2.0, 2.5, 2.1, 2.0])]
    assert flags == [True, True, False, False, False]
    assert es.stop and es.best_epoch == 1


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    r = np.random.default_rng(4)
    tensors = {"a": r.standard_normal((3, 2)), "b": np.array([1e-300, -0.1, math.pi])}
    save_checkpoint(tmp_path / "c.json", {"k": 5}, tensors, extra={"note": "x"})
    config, back, opt, extra = load_checkpoint(tmp_path / "c.json")
    assert config == {"k": 5} and opt is None and extra == {"note": "x"}
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_rejects_bad_files(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.json")
    (tmp_path / "v.json").write_text(json.dumps({"format_version": 99, "tensors": {}, "config": {}}))
    with pytest.raises(ParseError, match="format_version"):
        load_checkpoint(tmp_path / "v.json")
    (tmp_path / "s.json").write_text(json.dumps(
        {"format_version": 1, "config": {}, "tensors": {"a": {"shape": [2, 2], "data": [1.0]}}}))
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "s.json")
