import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mindqa.ndnet import (AdamState, NonFiniteError, ShapeError, Tape, TapeError, Tensor, adam_step,
                          clip_global_norm, global_norm, grad_check, high_precision, nn, ops)


def _grad(fn, **point):
    with Tape() as tape:
        P = tape.watch(point)
        loss = fn(P)
    return tape.backward(loss)


# ------------------------------------------------------------ forward values

def test_elu1p_at_zero():
    assert float(ops.elu1p(Tensor([0.0])).data[0]) == 1.0


def test_elu1p_branches():
    x = np.array([-3.0, -0.5, 0.0, 2.0])
    out = ops.elu1p(Tensor(x)).data
    np.testing.assert_allclose(out, np.where(x >= 0, x + 1, np.exp(x)), rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-80, 80), min_size=1, max_size=8))
def test_elu1p_strictly_positive(xs):
    assert (ops.elu1p(Tensor(xs)).data > 0).all()


def test_log_sum_exp_two_zeros():
    assert abs(float(ops.log_sum_exp(Tensor([0.0, 0.0])).data) - math.log(2)) < 1e-6


def test_log_sum_exp_overflow_case():
    with high_precision():
        v = float(ops.log_sum_exp(Tensor([1000.0, 1000.0])).data)
    assert math.isfinite(v)
    assert abs(v - (1000 + math.log(2))) < 1e-9


def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor([2.5, 2.5, 2.5])).data, [1 / 3] * 3, rtol=1e-6)


def test_conv_all_ones_counts():
    out = ops.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), stride=1)
    assert out.shape == (1, 1, 3, 3)
    assert (out.data == 9).all()


def _conv_loop(x, w, s):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = (h - kh) // s + 1, (wd - kw) // s + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for k in range(o):
            for i in range(oh):
                for j in range(ow):
                    out[b, k, i, j] = (x[b, :, i * s:i * s + kh, j * s:j * s + kw] * w[k]).sum()
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_direct_loops(rng, stride):
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    with high_precision():
        got = ops.conv2d(Tensor(x), Tensor(w), stride=stride).data
    np.testing.assert_allclose(got, _conv_loop(x, w, stride), rtol=1e-10, atol=1e-10)


def test_conv_transpose_is_adjoint(rng):
    # <conv(x, w), y> == <x, conv_transpose(y, w')> with w' the same kernel read as (Cin, Cout)
    x = rng.standard_normal((2, 3, 10, 10))
    w = rng.standard_normal((5, 3, 4, 4))
    with high_precision():
        y = rng.standard_normal(ops.conv2d(Tensor(x), Tensor(w), stride=2).shape)
        lhs = (ops.conv2d(Tensor(x), Tensor(w), stride=2).data * y).sum()
        back = ops.conv_transpose2d(Tensor(y), Tensor(w), stride=2).data
    assert back.shape == x.shape
    assert abs(lhs - (x * back).sum()) < 1e-9 * max(1.0, abs(lhs))


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        ops.log(Tensor([0.0]))


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    a = ops.tanh(ops.matmul(Tensor(x), Tensor(w))).data
    b = ops.tanh(ops.matmul(Tensor(x), Tensor(w))).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- backward

def test_square_gradient():
    g = _grad(lambda P: ops.mul(P["x"], P["x"]), x=np.array(3.0))
    assert float(g["x"]) == pytest.approx(6.0)


def test_sum_of_softmax_has_zero_gradient(rng):
    g = _grad(lambda P: ops.sum(ops.softmax(P["z"])), z=rng.standard_normal(5))
    np.testing.assert_allclose(g["z"], 0.0, atol=1e-6)


def test_unused_leaf_gets_zero_gradient():
    g = _grad(lambda P: ops.sum(P["a"]), a=np.ones(3), b=np.ones(2))
    assert (g["b"] == 0).all()


def test_backward_rejects_non_scalar_and_foreign_loss():
    with Tape() as tape:
        P = tape.watch({"a": np.ones(3)})
        v = ops.scale(P["a"], 2.0)
    with pytest.raises(TapeError):
        tape.backward(v)
    with pytest.raises(TapeError):
        tape.backward(ops.sum(Tensor(np.ones(3))))


def test_grad_check_square():
    assert grad_check(lambda P: ops.sum(ops.square(P["x"])), {"x": np.array([1.0])}) < 1e-6


def test_grad_check_raises_on_non_finite_probe():
    def fn(P):
        return ops.sum(ops.log(P["x"]))
    with pytest.raises(NonFiniteError):
        grad_check(fn, {"x": np.array([5e-5])}, eps=1e-4)


def test_two_layer_perceptron_gradients(rng):
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    point = {"w1": rng.standard_normal((4, 5)), "b1": rng.standard_normal(5),
             "w2": rng.standard_normal((5, 3)), "b2": rng.standard_normal(3)}

    def fn(P):
        h = ops.tanh(ops.add(ops.matmul(x, P["w1"]), P["b1"]))
        logp = ops.log_softmax(ops.add(ops.matmul(h, P["w2"]), P["b2"]))
        return ops.neg(ops.mean(logp[np.arange(6), y]))

    assert grad_check(fn, point) < 1e-4


UNARY = ["sigmoid", "tanh", "exp", "square", "elu", "elu1p", "softplus"]


@pytest.mark.parametrize("name", UNARY)
def test_unary_primitive_gradients(rng, name):
    f = getattr(ops, name)
    x = rng.standard_normal((3, 4))
    assert grad_check(lambda P: ops.sum(ops.mul(f(P["x"]), np.arange(12.0).reshape(3, 4))), {"x": x}) < 1e-4


def test_structural_and_reduction_gradients(rng):
    point = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 2)), "c": rng.uniform(0.5, 2, (3, 4))}
    mask = rng.random((3, 4)) > 0.5
    wts = rng.standard_normal((4, 6))

    def fn(P):
        cat = ops.concat([P["a"], P["b"]], axis=1)
        t = ops.transpose(ops.reshape(cat, (6, 3)))
        s = ops.sum(ops.mul(t, ops.transpose(ops.reshape(ops.concat([P["c"], P["b"]], axis=1), (6, 3)))))
        w = ops.where(mask, ops.div(P["a"], P["c"]), ops.log(P["c"]))
        m = ops.mean(ops.log_sum_exp(w, axis=-1)) + ops.sum(ops.log_softmax(P["a"], axis=0)[1])
        r = ops.sum(ops.matmul(ops.sub(P["a"], ops.neg(P["c"])), wts), axis=0, keepdims=True)
        return ops.add(ops.add(s, m), ops.mean(ops.relu(r)))

    assert grad_check(fn, point) < 1e-4


def test_bce_and_conv_gradients(rng):
    point = {"w": rng.standard_normal((2, 3, 3, 3)) * 0.3, "v": rng.standard_normal((2, 3, 4, 4)) * 0.3}
    x = rng.standard_normal((2, 3, 8, 8))
    target = rng.random((2, 3, 13, 13))

    def fn(P):
        h = ops.elu(ops.conv2d(x, P["w"], stride=2))
        up = ops.conv_transpose2d(h, P["v"], stride=3)
        return ops.mean(ops.bce_with_logits(up, target[:, :, :up.shape[2], :up.shape[3]]))

    assert grad_check(fn, point) < 1e-4


# ------------------------------------------------------------------- LSTM

def test_lstm_zero_params_zero_state():
    h, c = nn.lstm_cell(np.ones((1, 3)), np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((7, 16)), np.zeros(16))
    assert (h.data == 0).all()


def test_lstm_output_bounded(rng):
    P = {}
    nn.init_lstm(rng, P, "l", 3, 4)
    h, c = nn.lstm(P, "l", rng.standard_normal((5, 3)) * 10, rng.standard_normal((5, 4)), rng.standard_normal((5, 4)))
    assert np.abs(h.data).max() < 1


def test_lstm_forget_bias_is_one(rng):
    P = {}
    nn.init_lstm(rng, P, "l", 3, 4)
    assert (P["l.b"][4:8] == 1.0).all()


def test_lstm_three_steps_gradients(rng):
    P = {}
    nn.init_lstm(rng, P, "l", 3, 4)
    xs = rng.standard_normal((3, 2, 3))

    def fn(Q):
        h = c = np.zeros((2, 4))
        for t in range(3):
            h, c = nn.lstm(Q, "l", xs[t], h, c)
        return ops.sum(ops.square(h))

    assert grad_check(fn, P) < 1e-4


# ------------------------------------------------------- clipping and Adam

def test_clip_identity_under_threshold():
    g = clip_global_norm({"a": np.array([3.0, 4.0])}, 10.0)
    np.testing.assert_array_equal(g["a"], [3.0, 4.0])


def test_clip_scales_down():
    g = clip_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.8])


def test_clip_zero_and_empty():
    assert (clip_global_norm({"a": np.zeros(3)}, 1.0)["a"] == 0).all()
    assert clip_global_norm({}, 1.0) == {}
    with pytest.raises(ValueError):
        clip_global_norm({"a": np.ones(2)}, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(0.1, 100))
def test_clip_bound_and_idempotent(vals, m):
    g = {"a": np.array(vals[: len(vals) // 2 + 1]), "b": np.array(vals)}
    once = clip_global_norm(g, m)
    assert global_norm(once) <= m * (1 + 1e-6) + 1e-6
    twice = clip_global_norm(once, m)
    for k in g:
        np.testing.assert_allclose(twice[k], once[k], rtol=1e-12)


def test_adam_zero_grad_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState(lr=0.1)
    st_.m["w"] = np.array([0.5, 0.5])
    st_.v["w"] = np.array([0.2, 0.2])
    adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_allclose(np.abs(st_.m["w"]), [0.45, 0.45])
    assert st_.step == 1


def test_adam_first_step_by_hand():
    # t=1: m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    g = np.array([0.3, -2.0, 1e-3])
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": g.copy()}, AdamState(lr=1e-2))
    expected = -1e-2 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-5)


def test_adam_identical_grads_identical_updates():
    p = {"a": np.ones(2), "b": np.ones(2)}
    s = AdamState(lr=1e-3)
    for _ in range(3):
        adam_step(p, {"a": np.array([0.1, -0.2]), "b": np.array([0.1, -0.2])}, s)
    assert p["a"].tobytes() == p["b"].tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())
