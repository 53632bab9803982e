import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rawnet2cm import autograd as ag
from rawnet2cm.autograd import Tensor

from oracles import central_diff, naive_conv1d, rel_error

RNG = np.random.default_rng(1234)


def gradcheck(build, inputs, tol=1e-4):
    """Compare backprop against central differences for every tensor in ``inputs``."""
    for t in inputs:
        t.grad = None
    build().backward()
    for t in inputs:
        fd = central_diff(lambda: float(build().data), t.data)
        err = rel_error(t.grad, fd)
        assert err < tol, (t.name, err)


def param(shape, scale=1.0, name=None):
    return Tensor(RNG.standard_normal(shape) * scale, requires_grad=True, name=name)


def weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return ag.tensor_sum(ag.mul(y, Tensor(w)))


# ---------------------------------------------------------------- conv1d

def test_conv1d_zero_input_gives_zero_output():
    x = Tensor(np.zeros((1, 2, 20)))
    w = Tensor(RNG.standard_normal((3, 2, 5)))
    assert np.all(ag.conv1d(x, w).data == 0)


def test_conv1d_matches_sliding_dot_product():
    x = RNG.standard_normal((1, 1, 8))
    w = RNG.standard_normal((1, 1, 3))
    y = ag.conv1d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(y, naive_conv1d(x, w), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (3, 1), (1, 2)])
def test_conv1d_multichannel_matches_oracle(stride, padding):
    x = RNG.standard_normal((2, 3, 17))
    w = RNG.standard_normal((4, 3, 5))
    y = ag.conv1d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    np.testing.assert_allclose(y, naive_conv1d(x, w, stride, padding), rtol=1e-10, atol=1e-12)


def test_conv1d_large_input_chunked_path_matches():
    x = RNG.standard_normal((2, 1, 3000)).astype(np.float32)
    w = RNG.standard_normal((8, 1, 129)).astype(np.float32)
    full = ag.conv1d(Tensor(x), Tensor(w)).data
    old = ag._IM2COL_LIMIT
    ag._IM2COL_LIMIT = 10
    try:
        chunked = ag.conv1d(Tensor(x), Tensor(w)).data
    finally:
        ag._IM2COL_LIMIT = old
    np.testing.assert_allclose(chunked, full, rtol=1e-5, atol=1e-5)


def test_conv1d_paper_length():
    x = Tensor(np.zeros((1, 1, 64000), dtype=np.float32))
    w = Tensor(np.zeros((1, 1, 129), dtype=np.float32))
    assert ag.conv1d(x, w).shape == (1, 1, 63872)


@settings(max_examples=40, deadline=None)
@given(t=st.integers(5, 60), k=st.integers(1, 5), stride=st.integers(1, 4), pad=st.integers(0, 2))
def test_conv1d_output_length_formula(t, k, stride, pad):
    y = ag.conv1d(Tensor(np.ones((1, 1, t))), Tensor(np.ones((2, 1, k))), stride=stride, padding=pad)
    assert y.shape[2] == (t + 2 * pad - k) // stride + 1


def test_conv1d_channel_mismatch():
    with pytest.raises(ag.ShapeError):
        ag.conv1d(Tensor(np.zeros((1, 2, 10))), Tensor(np.zeros((1, 3, 3))))


def test_conv1d_too_short():
    with pytest.raises(ag.ShapeError):
        ag.conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 3))))


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 1)])
def test_conv1d_gradients(stride, padding):
    x = param((2, 3, 11), name="x")
    w = param((4, 3, 3), name="w")
    proj = RNG.standard_normal(ag.conv1d(x, w, stride, padding).shape)
    gradcheck(lambda: weighted_sum(ag.conv1d(x, w, stride, padding), proj), [x, w])


# ---------------------------------------------------------------- maxpool

def test_maxpool_paper_lengths():
    assert ag.maxpool1d(Tensor(np.zeros((1, 1, 63872))), 3).shape[2] == 21290
    lengths = []
    x = Tensor(np.zeros((1, 1, 2365)))
    for _ in range(4):
        x = ag.maxpool1d(x, 3)
        lengths.append(x.shape[2])
    assert lengths == [788, 262, 87, 29]


def test_maxpool_constant_input():
    y = ag.maxpool1d(Tensor(np.full((2, 3, 10), 4.5)), 3)
    assert y.shape == (2, 3, 3) and np.all(y.data == 4.5)


def test_maxpool_tie_gradient_goes_to_first():
    x = Tensor(np.array([[[1.0, 1.0, 0.0, 2.0, 5.0, 5.0, 9.0]]]), requires_grad=True)
    ag.tensor_sum(ag.maxpool1d(x, 3)).backward()
    np.testing.assert_array_equal(x.grad, [[[1, 0, 0, 0, 1, 0, 0]]])


def test_maxpool_window_too_large():
    with pytest.raises(ag.ShapeError):
        ag.maxpool1d(Tensor(np.zeros((1, 1, 2))), 3)


def test_maxpool_gradients():
    x = param((2, 3, 14), name="x")
    proj = RNG.standard_normal((2, 3, 4))
    gradcheck(lambda: weighted_sum(ag.maxpool1d(x, 3), proj), [x])


# ---------------------------------------------------------------- batch norm

def test_batch_norm_identity_on_standardized_input():
    x = RNG.standard_normal((4, 3, 50))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    st_ = ag.BatchNormState.create(3, np.float64)
    y = ag.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, training=True)
    np.testing.assert_allclose(y.data, x, atol=1e-4)


def test_batch_norm_constant_channel_maps_to_beta():
    x = RNG.standard_normal((2, 2, 10))
    x[:, 1, :] = 7.0
    st_ = ag.BatchNormState.create(2, np.float64)
    beta = np.array([0.0, 0.25])
    y = ag.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(beta), st_, training=True)
    assert np.all(np.isfinite(y.data))
    np.testing.assert_allclose(y.data[:, 1, :], 0.25, atol=1e-12)


def test_batch_norm_train_statistics():
    x = RNG.standard_normal((3, 4, 40)) * 5 + 2
    st_ = ag.BatchNormState.create(4, np.float64)
    y = ag.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), st_, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 2)), 1, atol=1e-3)
    assert not np.allclose(st_.running_mean, 0)


def test_batch_norm_eval_before_training_uses_initial_stats():
    x = RNG.standard_normal((1, 2, 5))
    st_ = ag.BatchNormState.create(2, np.float64)
    y = ag.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, training=False)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + st_.eps), rtol=1e-12)
    np.testing.assert_array_equal(st_.running_mean, 0)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    x = param((3, 2, 7), name="x")
    g = param((2,), name="gamma")
    b = param((2,), name="beta")
    st_ = ag.BatchNormState(np.array([0.3, -0.2]), np.array([1.5, 0.7]))
    proj = RNG.standard_normal((3, 2, 7))
    gradcheck(lambda: weighted_sum(ag.batch_norm(x, g, b, st_, training), proj), [x, g, b])


# ---------------------------------------------------------------- elementwise

def test_leaky_relu_and_sigmoid_values():
    assert ag.leaky_relu(Tensor(np.array(5.0)), 0.3).data == 5.0
    assert ag.leaky_relu(Tensor(np.array(-2.0)), 0.3).data == pytest.approx(-0.6)
    assert ag.sigmoid(Tensor(np.array(0.0))).data == 0.5
    s = ag.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(s)) and s[0] >= 0 and s[1] <= 1


def test_elementwise_gradients():
    x = param((3, 5), name="x")
    y = param((3, 5), name="y")
    proj = RNG.standard_normal((3, 5))
    gradcheck(lambda: weighted_sum(ag.leaky_relu(x, 0.3), proj), [x])
    gradcheck(lambda: weighted_sum(ag.sigmoid(x), proj), [x])
    gradcheck(lambda: weighted_sum(ag.tanh(x), proj), [x])
    gradcheck(lambda: weighted_sum(ag.sub(ag.mul(x, y), ag.add(x, y)), proj), [x, y])


def test_channel_ops_gradients():
    x = param((2, 3, 6), name="x")
    s = param((2, 3), name="s")
    proj = RNG.standard_normal((2, 3, 6))
    gradcheck(lambda: weighted_sum(ag.add_channel(ag.mul_channel(x, s), s), proj), [x, s])
    proj2 = RNG.standard_normal((2, 3))
    gradcheck(lambda: weighted_sum(ag.mean_time(x), proj2), [x])
    proj3 = RNG.standard_normal((2, 6, 3))
    gradcheck(lambda: weighted_sum(ag.swap_time_channel(x), proj3), [x])


def test_no_broadcasting():
    with pytest.raises(ag.ShapeError):
        ag.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))


# ---------------------------------------------------------------- dense / loss

def test_linear_gradients():
    x = param((4, 3), name="x")
    w = param((2, 3), name="w")
    b = param((2,), name="b")
    proj = RNG.standard_normal((4, 2))
    gradcheck(lambda: weighted_sum(ag.linear(x, w, b), proj), [x, w, b])
    v = param((3,), name="v")
    gradcheck(lambda: weighted_sum(ag.linear(v, w, b), proj[0]), [v, w, b])


def test_cross_entropy_uniform_logits():
    for label in (0, 1):
        loss = ag.softmax_cross_entropy(Tensor(np.zeros(2)), label)
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_confident_correct():
    assert float(ag.softmax_cross_entropy(Tensor(np.array([20.0, -20.0])), 0).data) < 1e-15


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    for _ in range(10):
        z = Tensor(RNG.standard_normal(2) * 3, requires_grad=True)
        label = int(RNG.integers(2))
        ag.softmax_cross_entropy(z, label).backward()
        expected = np.exp(z.data) / np.exp(z.data).sum()
        expected[label] -= 1
        np.testing.assert_allclose(z.grad, expected, rtol=0, atol=1e-15)


def test_cross_entropy_batch_gradient():
    z = param((5, 2), name="z")
    labels = np.array([0, 1, 1, 0, 1])
    gradcheck(lambda: ag.softmax_cross_entropy(z, labels), [z])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_sums_to_one(vals):
    assert abs(ag.softmax(np.array(vals)).sum() - 1.0) < 1e-12


# ---------------------------------------------------------------- GRU

def _gru(d, h, scale=0.5, zero_bias=False):
    p = ag.GruParams(param((3 * h, d), scale, "w_ih"), param((3 * h, h), scale, "w_hh"),
                     param((3 * h,), scale, "b_ih"), param((3 * h,), scale, "b_hh"))
    if zero_bias:
        p.b_ih.data[:] = 0
        p.b_hh.data[:] = 0
    return p


def test_gru_zero_fixed_point():
    p = _gru(4, 6, zero_bias=True)
    h = ag.gru_sequence(Tensor(np.zeros((5, 4))), p)
    np.testing.assert_array_equal(h.data, np.zeros(6))


def test_gru_paper_size_output():
    h = 1024
    rng = np.random.default_rng(0)
    p = ag.GruParams(*(Tensor(rng.uniform(-0.03, 0.03, s).astype(np.float32))
                       for s in [(3 * h, 512), (3 * h, h), (3 * h,), (3 * h,)]))
    out = ag.gru_sequence(Tensor(rng.standard_normal((29, 512)).astype(np.float32)), p)
    assert out.shape == (1024,)


def test_gru_matches_manual_two_step_unroll():
    d, h = 3, 2
    p = _gru(d, h)
    x = RNG.standard_normal((2, d))
    sig = lambda v: 1 / (1 + np.exp(-v))
    wi, wh, bi, bh = (t.data for t in (p.w_ih, p.w_hh, p.b_ih, p.b_hh))
    state = np.zeros(h)
    for t in range(2):
        a = wi @ x[t] + bi
        c = wh @ state + bh
        r = sig(a[:h] + c[:h])
        z = sig(a[h:2 * h] + c[h:2 * h])
        n = np.tanh(a[2 * h:] + r * c[2 * h:])
        state = (1 - z) * n + z * state
    np.testing.assert_allclose(ag.gru_sequence(Tensor(x), p).data, state, rtol=1e-12)


def test_gru_empty_sequence():
    with pytest.raises(ag.ShapeError):
        ag.gru_sequence(Tensor(np.zeros((0, 3))), _gru(3, 2))


def test_gru_gradients():
    p = _gru(3, 4)
    x = param((2, 5, 3), name="x")
    proj = RNG.standard_normal((2, 4))
    gradcheck(lambda: weighted_sum(ag.gru_sequence(x, p), proj), [x, p.w_ih, p.w_hh, p.b_ih, p.b_hh])


# ---------------------------------------------------------------- backward contract

def test_backward_of_sum_is_ones():
    x = param((3, 4))
    ag.tensor_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_requires_scalar():
    x = param((3,))
    with pytest.raises(ag.GradientError):
        ag.sigmoid(x).backward()


def test_second_backward_without_reset_raises():
    x = param((3,))
    loss = ag.tensor_sum(ag.sigmoid(x))
    loss.backward()
    first = x.grad.copy()
    with pytest.raises(ag.GradientError):
        loss.backward()
    x.grad = None
    loss.backward()
    np.testing.assert_array_equal(x.grad, first)


def test_unreached_leaf_in_graph_gets_zero_grad():
    x = param((3,))
    w = param((3,))
    s = ag.split_last(ag.add(x, w), 3)
    loss = ag.tensor_sum(s[0])
    loss.backward()
    np.testing.assert_array_equal(x.grad, [1, 0, 0])


def test_no_grad_records_nothing():
    x = param((3,))
    with ag.no_grad():
        y = ag.sigmoid(x)
    assert not y.requires_grad and y.is_leaf


# ---------------------------------------------------------------- ADAM

def test_adam_zero_gradient_is_identity():
    p = [param((3, 2)), param((4,))]
    before = [t.data.copy() for t in p]
    state = ag.AdamState.for_params(p)
    for _ in range(5):
        ag.adam_step(p, [np.zeros((3, 2)), None], state)
    for t, b in zip(p, before):
        np.testing.assert_array_equal(t.data, b)


def test_adam_first_step_moves_by_lr():
    x = Tensor(np.array([0.5]), requires_grad=True)
    state = ag.AdamState.for_params([x])
    ag.adam_step([x], [np.array([1.0])], state)
    # first bias-corrected step is lr * g / (|g| + eps)
    assert x.data[0] == pytest.approx(0.5 - 1e-4 / (1 + 1e-8), abs=1e-15)
    assert state.lr == 1e-4 and state.beta1 == 0.9 and state.beta2 == 0.999 and state.eps == 1e-8


def test_adam_minimizes_quadratic_bowl():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = ag.AdamState.for_params([x], lr=0.01)
    for step in range(2000):
        ag.adam_step([x], [2 * x.data], state)
        if np.max(np.abs(x.data)) < 1e-3:
            break
    assert np.max(np.abs(x.data)) < 1e-3
    assert state.step == step + 1


def test_adam_shape_mismatch():
    x = param((3,))
    state = ag.AdamState.for_params([x])
    with pytest.raises(ag.ShapeError):
        ag.adam_step([x], [np.zeros(4)], state)
