import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import conv1d_loop, group_norm_loop, matmul_loop
from sscp import tensor as T
from sscp.functional import (avg_pool2d, batch_norm, bce_loss, conv2d, depthwise_conv1d, group_norm,
                             group_norm2d, pointwise_conv, upsample_nearest2d)
from sscp.gradcheck import EvaluationError, grad_check, grad_check_report
from sscp.metrics import DataError
from sscp.params import ParamStore
from sscp.tensor import ConfigError, FlopCounter, ShapeError, Tensor

finite = st.floats(-3, 3, allow_nan=False, width=64)


def shape_st(ndim, lo=1, hi=6):
    return st.tuples(*[st.integers(lo, hi)] * ndim)


def leaf(arr):
    return Tensor(arr, requires_grad=True)


def check(f, eps=1e-3, **arrays):
    """grad_check of f(*tensors) reduced by a fixed random projection."""
    store = ParamStore()
    for k, v in arrays.items():
        store.add(k, np.asarray(v, dtype=float))
    out_shape = f(*[store[k] for k in arrays]).shape
    proj = np.random.default_rng(7).standard_normal(out_shape)
    return grad_check(lambda: T.weighted_sum(f(*[store[k] for k in arrays]), proj), store, eps)


# -- depthwise_conv1d -----------------------------------------------------

def test_conv1d_identity_k1(rng):
    x = rng.standard_normal((3, 7))
    out = depthwise_conv1d(Tensor(x), Tensor(np.ones((3, 1))), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv1d_centered_identity_k3(rng):
    x = rng.standard_normal((2, 5))
    k = np.tile([0.0, 1.0, 0.0], (2, 1))
    assert np.array_equal(depthwise_conv1d(Tensor(x), Tensor(k), Tensor(np.zeros(2))).data, x)


def test_conv1d_box_filter_matches_loop():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    k = np.full((1, 3), 1 / 3)
    out = depthwise_conv1d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data
    assert np.allclose(out, conv1d_loop(x, k, [0.0]), atol=1e-15)
    assert np.allclose(out, [[1.0, 2.0, 3.0, 7 / 3]], atol=1e-15)


@given(st.integers(1, 4), st.integers(1, 9), st.sampled_from([1, 3, 5, 7]), st.integers(0, 2 ** 31))
def test_conv1d_random_matches_loop(G, L, k, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.standard_normal((G, L)), r.standard_normal((G, k)), r.standard_normal(G)
    out = depthwise_conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.allclose(out, conv1d_loop(x, w, b), atol=1e-12)


def test_conv1d_errors():
    with pytest.raises(ConfigError):
        depthwise_conv1d(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 2))))
    with pytest.raises(ShapeError):
        depthwise_conv1d(Tensor(np.zeros((2, 4))), Tensor(np.zeros((1, 3))))


# -- pointwise_conv / matmul ----------------------------------------------

def test_pointwise_identity(rng):
    x = rng.standard_normal((4, 6))
    assert np.array_equal(pointwise_conv(Tensor(x), Tensor(np.eye(4))).data, x)


def test_pointwise_zero_input_gives_bias():
    b = np.array([1.0, -2.0, 0.5])
    out = pointwise_conv(Tensor(np.zeros((4, 5))), Tensor(np.ones((3, 4))), Tensor(b)).data
    assert np.array_equal(out, np.repeat(b[:, None], 5, axis=1))


def test_pointwise_matches_triple_loop(rng):
    w, x = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    assert np.allclose(pointwise_conv(Tensor(x), Tensor(w)).data, matmul_loop(w, x), atol=1e-13)
    assert np.allclose(T.matmul(Tensor(w), Tensor(x)).data, matmul_loop(w, x), atol=1e-13)


def test_pointwise_shape_error():
    with pytest.raises(ShapeError):
        pointwise_conv(Tensor(np.zeros((4, 5))), Tensor(np.zeros((3, 3))))


# -- batch_norm ------------------------------------------------------------

def _bn(x, gamma=None, beta=None, train=True, eps=1e-5, rm=None, rv=None):
    C = x.shape[0]
    gamma = np.ones(C) if gamma is None else gamma
    beta = np.zeros(C) if beta is None else beta
    rm = Tensor(np.zeros(C)) if rm is None else rm
    rv = Tensor(np.ones(C)) if rv is None else rv
    return batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, eps=eps, train=train).data


def test_bn_constant_channel_is_zero():
    x = np.repeat(np.array([[2.0], [-1.5]]), 6, axis=1)
    assert np.array_equal(_bn(x), np.zeros_like(x))


def test_bn_gamma_zero_gives_beta(rng):
    beta = np.array([0.3, -0.7])
    out = _bn(rng.standard_normal((2, 5)), gamma=np.zeros(2), beta=beta)
    assert np.array_equal(out, np.repeat(beta[:, None], 5, axis=1))


def test_bn_two_values_hand_formula():
    out = _bn(np.array([[1.0, 3.0]]))
    expected = (np.array([1.0, 3.0]) - 2.0) / math.sqrt(1.0 + 1e-5)
    assert np.allclose(out[0], expected, atol=1e-15)
    assert np.allclose(out[0], [-1.0, 1.0], atol=1e-4)


def test_bn_running_stats_and_eval(rng):
    x = rng.standard_normal((3, 10)) * 2 + 1
    rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
    _bn(x, rm=rm, rv=rv)
    assert np.allclose(rm.data, 0.1 * x.mean(axis=1))
    assert np.allclose(rv.data, 0.9 + 0.1 * x.var(axis=1, ddof=1))
    out = _bn(x, train=False, rm=rm, rv=rv)
    assert np.allclose(out, (x - rm.data[:, None]) / np.sqrt(rv.data[:, None] + 1e-5))


def test_bn_empty_batch():
    with pytest.raises(ShapeError):
        _bn(np.zeros((2, 0)))


# -- group_norm ------------------------------------------------------------

def test_gn_constant_is_zero():
    out = group_norm(Tensor(np.full((4, 3), 2.5)), 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_gn_single_group_matches_layer_norm(rng):
    x = rng.standard_normal((4, 6))
    out = group_norm(Tensor(x), 1, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.allclose(out, (x - x.mean()) / np.sqrt(x.var() + 1e-5), atol=1e-13)


@given(st.sampled_from([(4, 1), (4, 2), (6, 3), (8, 4)]), st.integers(1, 7), st.integers(0, 2 ** 31))
def test_gn_matches_loop_and_moments(cg, N, seed):
    C, G = cg
    r = np.random.default_rng(seed)
    x, gamma, beta = r.standard_normal((C, N)) * 3, r.standard_normal(C), r.standard_normal(C)
    out = group_norm(Tensor(x), G, Tensor(gamma), Tensor(beta)).data
    assert np.allclose(out, group_norm_loop(x, G, gamma, beta, 1e-5), atol=1e-12)
    plain = group_norm(Tensor(x), G, Tensor(np.ones(C)), Tensor(np.zeros(C))).data
    for block, raw in zip(np.split(plain, G), np.split(x, G)):
        assert abs(block.mean()) < 1e-12
        v = raw.var()
        # normalised variance is v / (v + eps): within 1e-5 of 1 once v >= 1
        assert abs(block.var() - v / (v + 1e-5)) < 1e-12
        if v >= 1:
            assert abs(block.var() - 1) < 1e-5


def test_gn_groups_error():
    with pytest.raises(ConfigError):
        group_norm(Tensor(np.zeros((6, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


def test_gn_independent_of_batch_composition(rng):
    x = rng.standard_normal((3, 4, 5, 5))
    g, b = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    joint = group_norm2d(Tensor(x), 2, g, b).data
    for i in range(3):
        alone = group_norm2d(Tensor(x[i:i + 1]), 2, g, b).data
        assert np.array_equal(alone[0], joint[i])


# -- pooling / softmax -----------------------------------------------------

def test_avg_pool_shapes_and_values(rng):
    assert avg_pool2d(Tensor(rng.standard_normal((3, 14, 14))), 7, 7).shape == (3, 2, 2)
    assert np.allclose(avg_pool2d(Tensor(np.full((2, 6, 6), 1.7)), 3, 3).data, 1.7)
    out = avg_pool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2, 2).data
    assert np.array_equal(out, [[[2.5]]])


def test_avg_pool_too_large():
    with pytest.raises(ShapeError):
        avg_pool2d(Tensor(np.zeros((1, 4, 4))), 5, 5)


def test_softmax_examples():
    assert np.allclose(T.softmax_rows(Tensor(np.full((2, 4), 3.0))).data, 0.25)
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, [[1.0, 0.0]])
    assert np.allclose(T.softmax_rows(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)


@given(arrays(np.float64, shape_st(2, 1, 8), elements=st.floats(-50, 50, width=64)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=1) - 1) <= 1e-9)
    assert np.all((y > 0) | (x.max(axis=1, keepdims=True) - x > 700)) and np.all(y <= 1)


# -- indexing --------------------------------------------------------------

@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.data())
def test_flat_index_round_trip(shape, data):
    size = int(np.prod(shape))
    flat = data.draw(st.integers(0, size - 1))
    coord = T.unflat_index(flat, shape)
    assert T.flat_index(coord, shape) == flat
    assert np.ravel_multi_index(coord, shape) == flat
    assert T.strides_of(shape)[-1] == 1


def test_tensor_values_flat_view():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.values.tolist() == list(range(6))
    assert t.values.size == int(np.prod(t.shape))


# -- gradients -------------------------------------------------------------

def test_grad_check_linear_exact():
    # dyadic inputs and step keep every perturbed evaluation exact
    store = ParamStore()
    x = store.add("x", np.array([-2.0, 0.5, 1.0, 3.25, 7.0]))
    assert grad_check(lambda: T.sum_all(T.scale(x, 3.0)), store, eps=2.0 ** -10) == 0.0


def test_grad_check_sigmoid_at_zero():
    store = ParamStore()
    x = store.add("x", np.zeros(1))
    out = T.sum_all(T.sigmoid(x))
    out.backward()
    assert abs(x.grad[0] - 0.25) < 1e-6
    assert grad_check(lambda: T.sum_all(T.sigmoid(x)), store) < 1e-6


def test_grad_check_nonfinite_raises():
    store = ParamStore()
    x = store.add("x", np.array([0.0]))
    with pytest.raises(EvaluationError):
        grad_check(lambda: T.sum_all(T.scale(T.sigmoid(x), float("inf"))), store)


def test_grad_check_warns_on_eps(caplog):
    store = ParamStore()
    x = store.add("x", np.ones(2))
    grad_check(lambda: T.sum_all(x), store, eps=0.5)
    assert "outside the recommended" in caplog.text


def test_grad_check_detects_wrong_adjoint(monkeypatch):
    store = ParamStore()
    x = store.add("x", np.array([0.3, -1.2]))
    monkeypatch.setattr(T, "_sigmoid_grad", lambda s: 2 * s * (1 - s))
    assert grad_check(lambda: T.sum_all(T.sigmoid(x)), store) > 0.1


def test_kink_crossing_is_redifferenced():
    store = ParamStore()
    x = store.add("x", np.array([1e-4, -2e-4, 0.5]))
    rep = grad_check_report(lambda: T.sum_all(T.relu(x)), store, eps=1e-3)
    assert rep.kinked == 2
    assert rep.raw_max_error > 0.1
    assert rep.max_error < 1e-9


@given(shape_st(2), st.integers(0, 2 ** 31))
def test_elementwise_grads(shape, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(shape), r.standard_normal(shape)
    assert check(T.add, a=a, b=b) < 1e-6
    assert check(T.sub, a=a, b=b) < 1e-6
    assert check(T.mul, a=a, b=b) < 1e-6
    assert check(T.sigmoid, a=a) < 1e-6
    assert check(T.relu, a=a) < 1e-6
    assert check(T.absolute, a=a) < 1e-6
    assert check(lambda t: T.mean(t, axis=1, keepdims=True), a=a) < 1e-6
    assert check(T.softmax_rows, a=a) < 1e-6
    assert check(lambda t: T.mul(t, Tensor(b[:1])), a=a) < 1e-6


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_linear_algebra_grads(n, m, p, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((n, m)), r.standard_normal((m, p))
    assert check(T.matmul, a=a, b=b) < 1e-6
    assert check(lambda x, w: pointwise_conv(x, w, None), x=b, w=a) < 1e-6
    assert check(lambda t: T.concat([T.transpose(t), T.transpose(t)], axis=1), a=a) < 1e-6
    assert check(lambda t: T.stack(T.unstack(t), axis=0), a=a) < 1e-6


@given(st.integers(1, 4), st.integers(2, 8), st.sampled_from([1, 3, 5]), st.integers(0, 2 ** 31))
def test_norm_and_conv_grads(G, L, k, seed):
    r = np.random.default_rng(seed)
    x, w, bias = r.standard_normal((G, L)), r.standard_normal((G, k)), r.standard_normal(G)
    assert check(depthwise_conv1d, x=x, k=w, b=bias) < 1e-6
    gamma, beta = r.standard_normal(2 * G), r.standard_normal(2 * G)
    xx = r.standard_normal((2 * G, L))
    # normalisation curvature grows like 1/std, so random rows with a tiny
    # spread need a step well below that spread
    assert check(lambda t, g, b: group_norm(t, G, g, b), eps=1e-5, x=xx, g=gamma, b=beta) < 1e-4
    rm, rv = Tensor(np.zeros(2 * G)), Tensor(np.ones(2 * G))
    assert check(lambda t, g, b: batch_norm(t, g, b, rm, rv), eps=1e-5, x=xx, g=gamma, b=beta) < 1e-4


@given(st.integers(0, 2 ** 31))
def test_spatial_op_grads(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 2, 4, 4))
    w, b = r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)
    assert check(conv2d, x=x, w=w, b=b) < 1e-6
    assert check(lambda t: avg_pool2d(t, 2, 2), x=x) < 1e-6
    assert check(upsample_nearest2d, x=x) < 1e-6


def test_conv2d_matches_loop(rng):
    from oracles import conv2d_loop
    x, w, b = rng.standard_normal((2, 3, 5, 4)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
    assert np.allclose(conv2d(Tensor(x), Tensor(w), Tensor(b)).data, conv2d_loop(x, w, b), atol=1e-12)


def test_gradient_accumulates_over_reuse():
    x = leaf([2.0])
    T.sum_all(T.add(T.mul(x, x), x)).backward()
    assert x.grad[0] == 5.0


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert y._parents == () and not y.requires_grad


def test_sanctioned_ops_stay_finite(rng):
    x = Tensor(rng.standard_normal((3, 4)) * 800)
    for y in (T.sigmoid(x), T.softmax_rows(x), T.relu(x)):
        assert np.all(np.isfinite(y.data))


# -- bce -------------------------------------------------------------------

def test_bce_perfect_prediction():
    t = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert bce_loss(Tensor(np.clip(t, 1e-7, 1 - 1e-7)), t).item() < 1e-5


def test_bce_half_is_ln2():
    assert abs(bce_loss(Tensor(np.full((1, 3, 3), 0.5)), np.eye(3)[None]).item() - math.log(2)) < 1e-15


def test_bce_matches_pixel_sum(rng):
    p, t = rng.uniform(0.01, 0.99, (4, 4)), rng.integers(0, 2, (4, 4))
    ref = 0.0
    for pi, ti in zip(p.ravel(), t.ravel()):
        ref -= ti * math.log(pi) + (1 - ti) * math.log(1 - pi)
    assert abs(bce_loss(Tensor(p), t).item() - ref / 16) < 1e-14
    assert check(lambda q: bce_loss(q, t), p=p) < 1e-6


def test_bce_rejects_soft_target():
    with pytest.raises(DataError):
        bce_loss(Tensor(np.full((2, 2), 0.5)), np.full((2, 2), 0.5))


def test_flop_counter_counts_mac_as_two(rng):
    with FlopCounter() as fc:
        T.matmul(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 5))))
    assert fc.total == 2 * 3 * 4 * 5
