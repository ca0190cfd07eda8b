import io
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from drvit import tensor as T
from drvit.tensor import Tensor

RNG = np.random.default_rng(1234)


def leaf(*shape, scale=1.0):
    return T.parameter(RNG.standard_normal(shape) * scale)


def weighted(out):
    """Random fixed linear functional so every output coordinate matters."""
    w = np.random.default_rng(out.size).standard_normal(out.shape)
    return T.sum_(out * Tensor(w))


# -- examples ---------------------------------------------------------------------

def test_matmul_identity():
    a = RNG.standard_normal((3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_layer_norm_constant_vector_gives_shift():
    shift = np.array([0.1, -0.2, 0.3, 0.4])
    y = T.layer_norm(Tensor(np.full(4, 7.0)), Tensor(np.full(4, 3.0)), Tensor(shift))
    np.testing.assert_allclose(y.data, shift, atol=1e-12)


def test_backward_sum():
    x = T.parameter(RNG.standard_normal((2, 2)))
    T.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 2)))


def test_backward_sum_of_squares():
    x = T.parameter([1.0, 2.0])
    T.backward(T.sum_(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(T.ShapeError):
        T.backward(x * x)


def test_fanout_accumulates_and_unreachable_stays_none():
    x = T.parameter([3.0])
    y = T.parameter([5.0])
    T.backward(T.sum_(x * x + x))
    assert np.array_equal(x.grad, [7.0])
    assert y.grad is None


def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_debug_mode_rejects_non_finite_input():
    T.set_debug(True)
    try:
        with pytest.raises(T.NonFiniteError):
            T.relu(Tensor([1.0, np.nan]))
    finally:
        T.set_debug(False)


def test_two_layer_mlp_matches_finite_differences():
    x = Tensor(RNG.standard_normal((5, 4)))
    w1, b1 = leaf(4, 6), leaf(6)
    w2, b2 = leaf(6, 3), leaf(3)
    labels = np.array([0, 2, 1, 1, 0])

    def f(w1, b1, w2, b2):
        h = T.gelu(T.matmul(x, w1) + b1)
        return T.cross_entropy(T.matmul(h, w2) + b2, labels)

    assert T.grad_check(f, [w1, b1, w2, b2], 1e-5) < 1e-4


def test_grad_check_sum_of_squares():
    x = leaf(10)
    assert T.grad_check(lambda a: T.sum_(a * a), [x], 1e-5) < 1e-7


def test_grad_check_skips_frozen_inputs():
    x = leaf(3)
    frozen = Tensor(RNG.standard_normal(3))
    calls = []

    def f(a, b):
        calls.append(1)
        return T.sum_(a * b)

    T.grad_check(f, [x, frozen], 1e-5)
    # one analytic pass plus two evaluations per coordinate of ``x`` only
    assert len(calls) == 1 + 2 * 3


def test_grad_check_softmax_cross_entropy():
    logits = leaf(4, 5)
    assert T.grad_check(lambda z: T.cross_entropy(z, np.array([0, 1, 4, 2])), [logits]) < 1e-4


def test_grad_check_raises_on_non_finite_numeric_gradient():
    x = T.parameter([0.0])
    with np.errstate(all="ignore"), pytest.raises(T.NonFiniteError):
        T.grad_check(lambda a: T.sum_(T.log(a)), [x], 1e-5)


def test_cross_entropy_three_class_hand_value():
    # -log softmax([1, 2, 3])[2] = log(e + e^2 + e^3) - 3
    expected = np.log(np.e + np.e ** 2 + np.e ** 3) - 3.0
    ce = T.cross_entropy(Tensor([[1.0, 2.0, 3.0]]), np.array([2]))
    assert abs(ce.item() - expected) < 1e-12
    ce_soft = T.cross_entropy(Tensor([[1.0, 2.0, 3.0]]), np.array([[0.0, 0.0, 1.0]]))
    assert abs(ce_soft.item() - expected) < 1e-12


# -- per-op gradient checks ---------------------------------------------------------

OP_CASES = {
    "add": (lambda a, b: weighted(a + b), [(3, 4), (4,)]),
    "sub": (lambda a, b: weighted(a - b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: weighted(a * b), [(3, 4), (3, 4)]),
    "scale": (lambda a: weighted(T.scale(a, -2.5)), [(3, 4)]),
    "div": (lambda a, b: weighted(T.div(a, T.exp(b))), [(3, 4), (3, 4)]),
    "exp": (lambda a: weighted(T.exp(a)), [(3, 4)]),
    "log": (lambda a: weighted(T.log(T.exp(a) + 1.0)), [(3, 4)]),
    "relu": (lambda a: weighted(T.relu(a)), [(3, 4)]),
    "sigmoid": (lambda a: weighted(T.sigmoid(a)), [(3, 4)]),
    "gelu": (lambda a: weighted(T.gelu(a)), [(3, 4)]),
    "matmul": (lambda a, b: weighted(T.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "batched_matmul": (lambda a, b: weighted(T.matmul(a, b)), [(2, 3, 4), (2, 4, 2)]),
    "transpose": (lambda a: weighted(T.transpose(a, (2, 0, 1))), [(2, 3, 4)]),
    "reshape": (lambda a: weighted(T.reshape(a, (6, 4))), [(2, 3, 4)]),
    "concat": (lambda a, b: weighted(T.concat([a, b], axis=-1)), [(2, 3), (2, 5)]),
    "pad_last": (lambda a: weighted(T.pad_last(a, 3)), [(2, 3)]),
    "slice": (lambda a: weighted(a[:, 1:3]), [(3, 4)]),
    "sum": (lambda a: weighted(T.sum_(a, axis=1)), [(3, 4)]),
    "mean": (lambda a: weighted(T.mean(a, axis=0, keepdims=True)), [(3, 4)]),
    "softmax": (lambda a: weighted(T.softmax(a)), [(3, 4)]),
    "log_softmax": (lambda a: weighted(T.log_softmax(a)), [(3, 4)]),
    "layer_norm": (lambda a, g, b: weighted(T.layer_norm(a, g, b)), [(3, 5), (5,), (5,)]),
    "embedding": (lambda t: weighted(T.embedding(t, np.array([[0, 2], [2, 3]]))), [(4, 3)]),
    "mse": (lambda a, b: T.mse(a, b), [(3, 4), (3, 4)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, np.array([1, 0, 3])), [(3, 4)]),
    "conv2d_same": (lambda x, w, b: weighted(T.conv2d(x, w, b, 1, "same")),
                    [(2, 5, 5, 2), (3, 3, 2, 3), (3,)]),
    "conv2d_valid_stride2": (lambda x, w, b: weighted(T.conv2d(x, w, b, 2, "valid")),
                             [(1, 7, 7, 2), (3, 3, 2, 2), (2,)]),
    "conv2d_same_stride2_k4": (lambda x, w, b: weighted(T.conv2d(x, w, b, 2, "same")),
                               [(1, 6, 6, 2), (4, 4, 2, 3), (3,)]),
    "conv2d_transpose": (lambda x, w, b: weighted(T.conv2d_transpose(x, w, b, 2, "same")),
                         [(1, 3, 3, 2), (4, 4, 3, 2), (3,)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [T.parameter(rng.standard_normal(s)) for s in shapes]
    assert T.grad_check(fn, inputs, 1e-5) < 1e-4


def test_conv_transpose_is_adjoint_of_conv():
    x = RNG.standard_normal((2, 8, 8, 3))
    y = RNG.standard_normal((2, 4, 4, 5))
    w = RNG.standard_normal((4, 4, 3, 5))
    lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), None, 2, "same").data * y)
    rhs = np.sum(x * T.conv2d_transpose(Tensor(y), Tensor(w), None, 2, "same").data)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_conv2d_matches_direct_loop():
    x = RNG.standard_normal((1, 5, 6, 2))
    w = RNG.standard_normal((3, 3, 2, 4))
    got = T.conv2d(Tensor(x), Tensor(w), None, 1, "valid").data
    want = np.zeros((1, 3, 4, 4))
    for i in range(3):
        for j in range(4):
            want[0, i, j] = np.einsum("abc,abcd->d", x[0, i : i + 3, j : j + 3], w)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_stop_gradient_blocks_upstream():
    x = T.parameter([1.0, 2.0])
    y = T.parameter([3.0, 4.0])
    T.backward(T.sum_(T.stop_gradient(x * 2.0) * y))
    assert x.grad is None or not np.any(x.grad)
    assert np.array_equal(y.grad, [2.0, 4.0])


def test_straight_through_forward_and_backward():
    z_e = T.parameter([1.0, 2.0, 3.0])
    out = T.straight_through(z_e, np.array([9.0, 8.0, 7.0]))
    assert np.array_equal(out.data, [9.0, 8.0, 7.0])
    T.backward(T.sum_(out * Tensor([1.0, 2.0, 3.0])))
    assert np.array_equal(z_e.grad, [1.0, 2.0, 3.0])


def test_no_grad_records_nothing():
    x = T.parameter([1.0])
    with T.no_grad():
        y = x * x
    assert not y.requires_grad


# -- properties ---------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, max_side=5), elements=finite),
       st.integers(1, 4))
def test_concat_then_slices_reproduce_inputs(a, extra):
    b = np.arange(np.prod(a.shape[:-1]) * extra, dtype=np.float64).reshape(a.shape[:-1] + (extra,))
    c = T.concat([Tensor(a), Tensor(b)], axis=-1)
    k = a.shape[-1]
    assert np.array_equal(c[..., :k].data, a)
    assert np.array_equal(c[..., k:].data, b)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=finite),
       st.integers(0, 6))
def test_pad_then_slice_is_identity(a, width):
    p = T.pad_last(Tensor(a), width)
    assert p.shape[-1] == a.shape[-1] + width
    assert not np.any(p.data[..., a.shape[-1]:])
    assert np.array_equal(p[..., : a.shape[-1]].data, a)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(a):
    s = T.softmax(Tensor(a)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_backward_grads_are_finite_and_shaped(seed):
    rng = np.random.default_rng(seed)
    w = T.parameter(rng.standard_normal((4, 3)))
    g = T.parameter(np.ones(3))
    b = T.parameter(np.zeros(3))
    x = Tensor(rng.standard_normal((2, 4)) * 100)
    loss = T.cross_entropy(T.layer_norm(T.matmul(x, w), g, b), np.array([0, 2]))
    T.backward(loss)
    for p in (w, g, b):
        assert p.grad.shape == p.shape
        assert np.all(np.isfinite(p.grad))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4), elements=finite))
def test_tensor_serialization_roundtrip(a):
    raw = T.tensor_bytes(a)
    assert raw[:4] == b"TNSR"
    back = T.tensor_from_bytes(raw)
    assert back.shape == a.shape
    assert np.array_equal(back, a)


def test_truncated_tensor_names_offset():
    raw = T.tensor_bytes(np.ones((2, 3)))
    with pytest.raises(ValueError, match="offset"):
        T.read_tensor(io.BytesIO(raw[:-5]))
