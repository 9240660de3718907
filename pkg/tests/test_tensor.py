import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgdn import tensor as T
from mgdn.gradcheck import NonFiniteError, finite_diff_check
from mgdn.tensor import ShapeError, Tape, Tensor, no_grad

from oracles import conv2d_loop, depthwise_loop, dynamic_filter_loop, gelu_ref, matmul_loop


def rnd(rng, *shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("case", range(20))
def test_conv2d_matches_loop(case):
    rng = np.random.default_rng(case)
    k = [1, 3, 5][case % 3]
    H, W = rng.integers(k, 8, size=2)
    cin, cout = rng.integers(1, 4, size=2)
    x, w, b = rnd(rng, H, W, cin), rnd(rng, k, k, cin, cout), rnd(rng, cout)
    padding = "valid" if case % 4 == 3 else "same"
    got = T.conv2d(x, w, b, padding=padding).data
    np.testing.assert_allclose(got, conv2d_loop(x, w, b, padding), rtol=0, atol=1e-12)


@pytest.mark.parametrize("case", range(20))
def test_depthwise_matches_loop(case):
    rng = np.random.default_rng(100 + case)
    k = [1, 3, 5][case % 3]
    H, W, C = rng.integers(1, 7, size=3)
    x, w = rnd(rng, H, W, C), rnd(rng, k, k, C)
    np.testing.assert_allclose(T.depthwise_conv2d(x, w).data, depthwise_loop(x, w), atol=1e-12)


@pytest.mark.parametrize("case", range(20))
def test_matmul_matches_loop(case):
    rng = np.random.default_rng(200 + case)
    n, k, m = rng.integers(1, 7, size=3)
    a, b = rnd(rng, n, k), rnd(rng, k, m)
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, matmul_loop(a, b), atol=1e-12)


@pytest.mark.parametrize("case", range(20))
def test_dynamic_filter_matches_loop(case):
    rng = np.random.default_rng(300 + case)
    k = [1, 3, 5][case % 3]
    H, W, C = rng.integers(1, 7, size=3)
    x, kv = rnd(rng, H, W, C), rnd(rng, H, W, k * k)
    np.testing.assert_allclose(T.dynamic_filter(x, kv, k).data, dynamic_filter_loop(x, kv, k),
                               atol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)), padding="valid")


def test_dynamic_filter_rejects_even_kernel_and_bad_volume():
    with pytest.raises(ShapeError):
        T.dynamic_filter(np.zeros((3, 3, 1)), np.zeros((3, 3, 4)), 2)
    with pytest.raises(ShapeError):
        T.dynamic_filter(np.zeros((3, 3, 1)), np.zeros((3, 3, 8)), 3)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_softmax_example():
    out = T.softmax(Tensor(np.array([0.0, math.log(3.0)])), axis=0).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)


def test_softmax_backward_closed_form():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    w = np.array([1.0, -2.0, 0.5])
    T.tsum(T.softmax(x, axis=0) * w).backward()
    s = np.exp(x.data) / np.exp(x.data).sum()
    np.testing.assert_allclose(x.grad, s * (w - (s * w).sum()), atol=1e-14)


def test_layer_norm_unit_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(4, 5, 8))
    y = T.layer_norm(x, np.ones(8), np.zeros(8)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 33)
    np.testing.assert_allclose(T.gelu(x).data, gelu_ref(x), atol=1e-14)


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-15)


def test_product_rule_example():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = Tensor(np.array(5.0), requires_grad=True)
    (a * b + a * a).backward()
    assert a.grad == 9.0 and b.grad == 2.0


def test_gradients_accumulate_across_backward_calls():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(a * 3.0).backward()
    T.tsum(a * 3.0).backward()
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])


def test_backward_needs_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (a * 2.0).backward()


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad


def test_tape_backward_matches_graph_backward():
    rng = np.random.default_rng(1)
    x1 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x2 = Tensor(x1.data.copy(), requires_grad=True)

    def f(x):
        return T.tsum(T.sigmoid(x @ x.transpose(1, 0)) * 2.0 + T.exp(x * 0.1).sum())

    with Tape() as tape:
        loss = f(x1)
    tape.backward(loss)
    f(x2).backward()
    np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-14)


def test_broadcast_add_reduces_gradient():
    a = Tensor(np.zeros((2, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    T.tsum(a + b).backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_getitem_repeated_index_accumulates():
    a = Tensor(np.arange(4.0), requires_grad=True)
    T.tsum(a[np.array([0, 0, 2])]).backward()
    np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0, 0.0])


def test_gradcheck_flags_a_wrong_gradient():
    x = Tensor(np.array([0.5, 1.5]), requires_grad=True)

    def wrong_square():
        out = Tensor._make(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2
        return T.tsum(out)

    assert finite_diff_check(wrong_square, [x]) > 0.1


def test_gradcheck_rejects_bad_epsilon_and_nonfinite():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: T.tsum(x), [x], epsilon=1.0)
    y = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        finite_diff_check(lambda: T.tsum(T.log(y)), [y])


arrays = st.integers(1, 5).flatmap(
    lambda n: st.lists(st.floats(-5, 5), min_size=n, max_size=n).map(np.array))


@given(arrays)
@settings(max_examples=50, deadline=None)
def test_softmax_is_a_distribution(v):
    s = T.softmax(Tensor(v), axis=0).data
    assert np.all(s >= 0)
    assert abs(s.sum() - 1.0) < 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_conv_is_linear_in_input(seed):
    rng = np.random.default_rng(seed)
    x, y, w = rnd(rng, 4, 5, 2), rnd(rng, 4, 5, 2), rnd(rng, 3, 3, 2, 3)
    a, b = rng.normal(size=2)
    lhs = T.conv2d(a * x + b * y, w).data
    rhs = a * T.conv2d(x, w).data + b * T.conv2d(y, w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_dynamic_filter_with_delta_kernels_is_identity(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 5, 4, 3)
    kv = np.zeros((5, 4, 9))
    kv[..., 4] = 1.0
    np.testing.assert_array_equal(T.dynamic_filter(x, kv, 3).data, x)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_spatially_constant_dynamic_kernel_equals_depthwise(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 5, 6, 2)
    ker = rnd(rng, 3, 3)
    kv = np.broadcast_to(ker.reshape(1, 1, 9), (5, 6, 9)).copy()
    dw = np.repeat(ker[:, :, None], 2, axis=2)
    np.testing.assert_allclose(T.dynamic_filter(x, kv, 3).data, T.depthwise_conv2d(x, dw).data,
                               atol=1e-12)


@given(st.integers(0, 10_000), st.integers(-3, 3), st.integers(-3, 3))
@settings(max_examples=25, deadline=None)
def test_roll_pad_roundtrip(seed, dy, dx):
    x = np.random.default_rng(seed).normal(size=(4, 5, 2))
    back = T.roll2d(T.roll2d(x, dy, dx), -dy, -dx).data
    np.testing.assert_array_equal(back, x)
    padded = T.pad2d(x, 1, 2, 0, 3).data
    np.testing.assert_array_equal(padded[1:5, 0:5], x)
    assert padded.shape == (7, 8, 2)
