import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vesselnet import tensor as T
from vesselnet.checks import check_function, op_cases
from vesselnet.tensor import ComputationTape, DimensionError, NumericError, ParameterError, Tensor


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def test_sum_gradient_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_shared_input_accumulates():
    x = leaf([3.0])
    y = x * x + x * 2.0
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_second_backward_rejected():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_non_finite_forward_is_error():
    with pytest.raises(NumericError):
        T.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NumericError):
        T.exp(Tensor(np.array([1e4])))


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_broadcast_mismatch_names_op():
    with pytest.raises(DimensionError, match="add"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert y._node is None and not y.requires_grad


def test_float64_stays_float64_through_scalar_reductions():
    x = leaf(np.ones((2, 3)))
    assert ((x * x).sum() * 0.5).dtype == np.float64
    assert (x.mean()).dtype == np.float64


def test_tape_is_topological_and_complete():
    a, b = leaf([1.0]), leaf([2.0])
    c = a * b
    d = c + a
    e = T.exp(d) * c
    tape = ComputationTape.from_root(e)
    pos = {id(t): i for i, t in enumerate(tape.order)}
    for t in tape.order:
        if t._node is not None:
            assert all(pos[id(i)] < pos[id(t)] for i in t._node.inputs)
    assert len(tape.order) == len({id(t) for t in tape.order}) == 6


def test_leaky_relu_definition():
    out = T.leaky_relu(Tensor(np.array([-1.0, 0.0, 2.0])), 0.01)
    np.testing.assert_allclose(out.data, [-0.01, 0.0, 2.0])


def test_layer_norm_of_constant_is_zero():
    out = T.layer_norm(Tensor(np.full((2, 5), 3.0)), axes=-1)
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_needs_positive_eps():
    with pytest.raises(ParameterError):
        T.layer_norm(Tensor(np.ones((2, 3))), axes=-1, eps=0.0)


def test_layer_norm_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4, 5))
    ref = (x - x.mean(axis=(1, 2), keepdims=True)) / np.sqrt(x.var(axis=(1, 2), keepdims=True) + 1e-5)
    np.testing.assert_allclose(T.layer_norm(Tensor(x), (1, 2)).data, ref, rtol=1e-12)


def test_softmax_and_log_softmax_agree():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 3)) * 30
    s = T.softmax(Tensor(x), axis=1).data
    ls = T.log_softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(np.log(s + 1e-300), ls, atol=1e-9)
    np.testing.assert_allclose(s.sum(axis=1), 1.0)


def test_softmax_gradient_fd():
    assert check_function(lambda a: T.softmax(a, axis=1), [np.random.default_rng(2).normal(size=(2, 5))]) < 1e-4


def test_linear_matches_matmul():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w.T + b)


def test_index_select_and_pad_forward():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.index_select(Tensor(x), np.array([2, 0]), 1).data, x[:, [2, 0]])
    np.testing.assert_array_equal(T.pad(Tensor(x), [(1, 0), (0, 1)]).data, np.pad(x, [(1, 0), (0, 1)]))


def test_power_zero_is_one():
    x = leaf([0.0, 2.0])
    y = T.power(x, 0.0)
    np.testing.assert_array_equal(y.data, [1.0, 1.0])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_default_dtype_switch():
    old = T.get_default_dtype()
    try:
        T.set_default_dtype(np.float64)
        assert Tensor([1.0]).dtype == np.float64
    finally:
        T.set_default_dtype(old)
    assert Tensor([1.0]).dtype == np.float32


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
@pytest.mark.parametrize("dtype,tol", [("float64", 1e-6), ("float32", 1e-3)])
def test_op_gradients_match_finite_differences(name, dtype, tol):
    fn, inputs = op_cases(np.random.default_rng(0))[name]
    assert check_function(fn, inputs, dtype) < tol


shapes = hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4)


@settings(max_examples=50, deadline=None)
@given(hnp.mutually_broadcastable_shapes(num_shapes=2, min_dims=1, max_dims=3, max_side=4), st.integers(0, 10**6))
def test_broadcast_add_grad_reduces_to_input_shape(shapes_, seed):
    rng = np.random.default_rng(seed)
    sa, sb = shapes_.input_shapes
    a, b = leaf(rng.normal(size=sa)), leaf(rng.normal(size=sb))
    out = a * b + a
    out.sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    # d/db sum(a*b) = sum of a over the broadcast axes
    full_a = np.broadcast_to(a.data, out.shape)
    expected_b = full_a.sum(axis=tuple(range(out.ndim - b.ndim)))
    for ax, n in enumerate(b.shape):
        if n == 1:
            expected_b = expected_b.sum(axis=ax, keepdims=True)
    np.testing.assert_allclose(b.grad, expected_b, rtol=1e-10, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, shapes, elements=st.floats(-5, 5)))
def test_grad_shape_matches_data(x):
    t = leaf(x)
    (T.sigmoid(t) * T.tanh(t)).sum().backward()
    assert t.grad.shape == t.shape
    assert np.all(np.isfinite(t.grad))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=4, max_side=4), elements=st.floats(-3, 3)))
def test_reshape_permute_roundtrip(x):
    t = Tensor(x)
    axes = tuple(reversed(range(x.ndim)))
    back = t.permute(*axes).permute(*np.argsort(axes)).reshape(-1).reshape(*x.shape)
    np.testing.assert_array_equal(back.data, x)
