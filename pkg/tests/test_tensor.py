import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import probe, separated64, var64
from imponderous.tensor import (
    InvalidArgumentError,
    Tape,
    Variable,
    add,
    backward,
    conv1d_channels,
    conv2d,
    conv2d_mfm,
    conv_algorithm,
    crop,
    dense,
    elemwise_max,
    global_avg_pool,
    grad_check,
    max_halves,
    maxpool2,
    mul,
    scale,
    scale_channels,
    sigmoid,
    softmax_cross_entropy,
    sum_all,
)

H = 1e-3
TOL = 1e-3


def V(a, grad=False):
    return Variable(np.asarray(a, dtype=np.float32), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_first_layer_shape():
    x = V(np.zeros((1, 1, 128, 128)))
    k = V(np.zeros((96, 1, 5, 5)))
    assert conv2d(x, k, V(np.zeros(96)), stride=1, pad=2).shape == (1, 96, 128, 128)


def test_conv2d_zero_input_gives_zero(rng):
    y = conv2d(V(np.zeros((1, 1, 3, 3))), V(rng.normal(size=(2, 1, 2, 2))), V(np.zeros(2)))
    assert np.all(y.value == 0)


def test_conv2d_identity_kernel(rng):
    x = V(rng.normal(size=(1, 1, 3, 3)))
    y = conv2d(x, V(np.ones((1, 1, 1, 1))), V(np.zeros(1)))
    np.testing.assert_array_equal(y.value, x.value)


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        hp, wp = 7 + 2 * pad, 6 + 2 * pad
        if (hp - 3) % stride or (wp - 2) % stride:
            continue
        y = conv2d(Variable(x), Variable(k), Variable(b), stride, pad).value
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho, wo = (hp - 3) // stride + 1, (wp - 2) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for i in range(ho):
            for j in range(wo):
                win = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 2]
                ref[:, :, i, j] = np.einsum("nchw,ochw->no", win, k) + b
        np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-10)


def test_conv2d_errors():
    x = V(np.zeros((1, 2, 5, 5)))
    with pytest.raises(InvalidArgumentError, match="channel"):
        conv2d(x, V(np.zeros((1, 3, 3, 3))), V(np.zeros(1)))
    with pytest.raises(InvalidArgumentError, match="non-integer"):
        conv2d(x, V(np.zeros((1, 2, 2, 2))), V(np.zeros(1)), stride=2)


@pytest.mark.parametrize("algo", ["im2col", "winograd"])
def test_conv2d_gradients(rng, algo):
    x, k, b = var64(rng, 2, 3, 6, 6), var64(rng, 4, 3, 3, 3), var64(rng, 4)
    with conv_algorithm(algo):
        assert grad_check(lambda v: probe(conv2d(v, k, b, 1, 1)), x, H) < TOL
        assert grad_check(lambda v: probe(conv2d(x, v, b, 1, 1)), k, H) < TOL
        assert grad_check(lambda v: probe(conv2d(x, k, v, 1, 1)), b, H) < TOL


def test_conv2d_strided_gradient(rng):
    x, k, b = var64(rng, 1, 2, 7, 7), var64(rng, 3, 2, 3, 3), var64(rng, 3)
    assert grad_check(lambda v: probe(conv2d(v, k, b, 2, 1)), x, H) < TOL
    assert grad_check(lambda v: probe(conv2d(x, v, b, 2, 1)), k, H) < TOL


@pytest.mark.parametrize("hw", [(10, 12), (8, 12), (16, 16)])
def test_winograd_matches_im2col(rng, hw):
    x = Variable(rng.normal(size=(2, 8, *hw)).astype(np.float32))
    k = Variable((rng.normal(size=(6, 8, 3, 3)) / 8).astype(np.float32))
    b = Variable(rng.normal(size=6).astype(np.float32))
    with conv_algorithm("im2col"):
        ref = conv2d(x, k, b, 1, 1).value
    with conv_algorithm("winograd"):
        fast = conv2d(x, k, b, 1, 1).value
    np.testing.assert_allclose(fast, ref, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("algo", ["im2col", "winograd"])
@pytest.mark.parametrize("hw,k,pad", [((8, 8), 3, 1), ((6, 10), 3, 1), ((8, 8), 1, 0)])
def test_conv2d_mfm_equals_composition(rng, algo, hw, k, pad):
    x = Variable(rng.normal(size=(2, 4, *hw)).astype(np.float32), requires_grad=True)
    kern = Variable((rng.normal(size=(6, 4, k, k)) / 4).astype(np.float32), requires_grad=True)
    b = Variable(rng.normal(size=6).astype(np.float32), requires_grad=True)
    grads = []
    with conv_algorithm(algo):
        for op in (lambda: conv2d_mfm(x, kern, b, pad), lambda: max_halves(conv2d(x, kern, b, 1, pad))):
            for v in (x, kern, b):
                v.zero_grad()
            with Tape() as tape:
                y = op()
                loss = probe(y)
            backward(tape, loss)
            grads.append((y.value, x.grad.copy(), kern.grad.copy(), b.grad.copy()))
    for fused, plain in zip(*grads):
        np.testing.assert_array_equal(fused, plain)


def test_conv2d_mfm_gradient(rng):
    x, k, b = var64(rng, 1, 3, 8, 8), var64(rng, 4, 3, 3, 3), var64(rng, 4)
    with conv_algorithm("winograd"):
        assert grad_check(lambda v: probe(conv2d_mfm(v, k, b, 1)), x, H) < TOL
        assert grad_check(lambda v: probe(conv2d_mfm(x, v, b, 1)), k, H) < TOL
        assert grad_check(lambda v: probe(conv2d_mfm(x, k, v, 1)), b, H) < TOL


# ---------------------------------------------------------------------------
# pooling, conv1d, dense, elementwise
# ---------------------------------------------------------------------------

def test_maxpool_shape_and_values():
    assert maxpool2(V(np.zeros((1, 48, 128, 128)))).shape == (1, 48, 64, 64)
    np.testing.assert_array_equal(maxpool2(V(np.full((1, 2, 4, 4), 3.5))).value, 3.5)
    assert maxpool2(V([[[[1, 2], [3, 4]]]])).value.item() == 4


def test_maxpool_tie_break_is_first_in_row_major_order():
    x = V(np.ones((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        y = sum_all(maxpool2(x))
    backward(tape, y)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_odd_size():
    with pytest.raises(InvalidArgumentError):
        maxpool2(V(np.zeros((1, 1, 3, 4))))


def test_maxpool_gradient(rng):
    x = separated64(rng, 2, 3, 6, 8)
    assert grad_check(lambda v: probe(maxpool2(v)), x, H) < TOL


def test_conv1d_channels_examples():
    v = V([[1, 2, 3, 4]])
    np.testing.assert_array_equal(conv1d_channels(v, V([0, 1, 0])).value, v.value)
    np.testing.assert_array_equal(conv1d_channels(v, V([0, 0, 0])).value, 0)
    np.testing.assert_array_equal(conv1d_channels(v, V([1, 1, 1])).value, [[3, 6, 9, 7]])


def test_conv1d_channels_is_correlation_not_convolution():
    # out[c] = sum_j k[j] * v[c + j - half]
    out = conv1d_channels(V([[1, 2, 3, 4]]), V([1, 0, 0])).value
    np.testing.assert_array_equal(out, [[0, 1, 2, 3]])


def test_conv1d_channels_errors():
    with pytest.raises(InvalidArgumentError):
        conv1d_channels(V([[1, 2, 3, 4]]), V([1, 1]))
    with pytest.raises(InvalidArgumentError):
        conv1d_channels(V([[1, 2]]), V([1, 1, 1]))


def test_conv1d_channels_gradient(rng):
    v, k = var64(rng, 3, 12), var64(rng, 5)
    assert grad_check(lambda a: probe(conv1d_channels(a, k)), v, H) < TOL
    assert grad_check(lambda a: probe(conv1d_channels(v, a)), k, H) < TOL


def test_dense_examples(rng):
    assert dense(V(np.zeros((1, 192))), V(np.zeros((192, 256))), V(np.zeros(256))).shape == (1, 256)
    x = V(rng.normal(size=(3, 5)))
    np.testing.assert_array_equal(dense(x, V(np.eye(5)), V(np.zeros(5))).value, x.value)
    b = V(np.arange(4))
    np.testing.assert_array_equal(dense(x, V(np.zeros((5, 4))), b).value, np.tile(b.value, (3, 1)))
    with pytest.raises(InvalidArgumentError):
        dense(x, V(np.zeros((4, 4))), V(np.zeros(4)))


def test_dense_gradient(rng):
    x, w, b = var64(rng, 3, 5), var64(rng, 5, 4), var64(rng, 4)
    assert grad_check(lambda v: probe(dense(v, w, b)), x, H) < TOL
    assert grad_check(lambda v: probe(dense(x, v, b)), w, H) < TOL
    assert grad_check(lambda v: probe(dense(x, w, v)), b, H) < TOL


def test_elemwise_max_examples(rng):
    a = V(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(elemwise_max(a, a).value, a.value)
    np.testing.assert_array_equal(elemwise_max(V(-np.abs(a.value)), V(np.zeros((3, 4)))).value, 0)
    np.testing.assert_array_equal(elemwise_max(V([1, 5]), V([4, 2])).value, [4, 5])
    with pytest.raises(InvalidArgumentError):
        elemwise_max(V([1, 2]), V([1, 2, 3]))


def test_elemwise_max_ties_route_to_first():
    a, b = V([1.0, 2.0], grad=True), V([1.0, 3.0], grad=True)
    with Tape() as tape:
        y = sum_all(elemwise_max(a, b))
    backward(tape, y)
    np.testing.assert_array_equal(a.grad, [1, 0])
    np.testing.assert_array_equal(b.grad, [0, 1])


def test_elemwise_max_gradient(rng):
    both = separated64(rng, 2, 4, 6)
    a, b = Variable(both.value[0]), Variable(both.value[1])
    assert grad_check(lambda v: probe(elemwise_max(v, b)), a, H) < TOL
    assert grad_check(lambda v: probe(elemwise_max(a, v)), b, H) < TOL


def test_max_halves_equals_elemwise_max_of_crops(rng):
    x = Variable(rng.normal(size=(2, 6, 3, 3)))
    ref = elemwise_max(crop(x, (slice(None), slice(0, 3))), crop(x, (slice(None), slice(3, 6))))
    np.testing.assert_array_equal(max_halves(x).value, ref.value)


def test_max_halves_gradient(rng):
    assert grad_check(lambda v: probe(max_halves(v)), separated64(rng, 2, 6, 3, 3), H) < TOL


def test_small_op_examples(rng):
    np.testing.assert_array_equal(global_avg_pool(V(np.full((2, 3, 4, 4), 2.5))).value, 2.5)
    assert sigmoid(V(0.0)).value == 0.5
    x = V(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(scale_channels(x, V(np.ones((2, 3)))).value, x.value)
    with pytest.raises(InvalidArgumentError):
        scale_channels(x, V(np.ones((2, 4))))
    with pytest.raises(InvalidArgumentError):
        add(V([1, 2]), V([1, 2, 3]))


def test_sigmoid_is_stable_at_extremes():
    out = sigmoid(V([-1000.0, 1000.0])).value
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


@pytest.mark.parametrize("name,fn,shapes", [
    ("sigmoid", lambda a: sigmoid(a[0]), [(3, 4)]),
    ("gap", lambda a: global_avg_pool(a[0]), [(2, 3, 4, 5)]),
    ("add", lambda a: add(a[0], a[1]), [(3, 4), (3, 4)]),
    ("mul", lambda a: mul(a[0], a[1]), [(3, 4), (3, 4)]),
    ("scale", lambda a: scale(a[0], 1.7), [(3, 4)]),
    ("scale_channels", lambda a: scale_channels(a[0], a[1]), [(2, 3, 4, 4), (2, 3)]),
    ("crop", lambda a: crop(a[0], (slice(None), slice(1, 3), slice(0, 2))), [(2, 4, 4)]),
])
def test_elementwise_gradients(rng, name, fn, shapes):
    args = [var64(rng, *s) for s in shapes]
    for i in range(len(args)):
        def f(v, i=i):
            a = list(args)
            a[i] = v
            return probe(fn(a))
        assert grad_check(f, args[i], H) < TOL, name


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Variable(np.zeros((3, 7))), np.array([0, 3, 6]))
    assert abs(float(loss.value) - math.log(7)) < 1e-6


def test_cross_entropy_large_margin_goes_to_zero():
    logits = np.zeros((1, 4), dtype=np.float32)
    logits[0, 2] = 1e4
    assert float(softmax_cross_entropy(Variable(logits), np.array([2])).value) == 0.0


def test_cross_entropy_gradient_hand_value():
    x = V([[0.0, 0.0]], grad=True)
    with Tape() as tape:
        loss = softmax_cross_entropy(x, np.array([0]))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [[-0.5, 0.5]])


def test_cross_entropy_label_range():
    with pytest.raises(InvalidArgumentError, match="out of range"):
        softmax_cross_entropy(Variable(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_gradient(rng):
    labels = np.array([0, 2, 1])
    assert grad_check(lambda v: softmax_cross_entropy(v, labels), var64(rng, 3, 4), H) < TOL


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
       st.lists(st.integers(0, 4), min_size=3, max_size=3))
def test_cross_entropy_nonnegative(logits, labels):
    assert float(softmax_cross_entropy(Variable(logits), np.array(labels)).value) >= 0


# ---------------------------------------------------------------------------
# tape / backward / grad_check
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = Variable(rng.normal(size=(2, 3)), requires_grad=True)
    with Tape() as tape:
        y = sum_all(x)
    backward(tape, y)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_fan_out_accumulates(rng):
    x = Variable(rng.normal(size=(4,)), requires_grad=True)
    with Tape() as tape:
        y = sum_all(add(x, x))
    backward(tape, y)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(4))


def test_backward_requires_scalar_root():
    x = Variable(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = add(x, x)
    with pytest.raises(InvalidArgumentError):
        backward(tape, y)


def test_tape_is_topological(rng):
    x = Variable(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    with Tape() as tape:
        sum_all(maxpool2(add(x, x)))
    seen = {x.tape_id}
    for node in tape.nodes:
        assert all(inp.tape_id in seen or not inp.requires_grad for inp in node.inputs)
        seen.add(node.output.tape_id)


def test_no_recording_outside_tape(rng):
    x = Variable(rng.normal(size=(3,)), requires_grad=True)
    y = add(x, x)
    assert not y.requires_grad


def test_grad_check_exact_quadratic(rng):
    x = var64(rng, 5)
    assert grad_check(lambda v: sum_all(mul(v, v)), x, H) < 1e-6


def test_grad_check_reports_wrong_gradient(rng):
    from imponderous import tensor

    def bad_square(v):
        return tensor._record((v,), v.value ** 2, lambda g: (g * 3 * v.value,))

    assert grad_check(lambda v: sum_all(bad_square(v)), var64(rng, 4), H) > 0.1


def test_grad_check_nan_is_failure():
    x = Variable(np.array([1.0, 2.0]))
    from imponderous import tensor

    def nan_op(v):
        return tensor._record((v,), np.asarray(np.nan), lambda g: (np.zeros_like(v.value),))

    assert grad_check(nan_op, x, H) == float("inf")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (1, 3, 4, 4), elements=st.floats(-10, 10, width=32)))
def test_identity_conv_and_constant_pool(x):
    y = conv2d(Variable(x), V(np.eye(3).reshape(3, 3, 1, 1)), V(np.zeros(3)))
    np.testing.assert_array_equal(y.value, x)
    c = np.full_like(x, x.flat[0])
    np.testing.assert_array_equal(maxpool2(Variable(c)).value, x.flat[0])


def test_ops_are_pure(rng):
    x = Variable(rng.normal(size=(2, 4, 8, 8)).astype(np.float32))
    k = Variable(rng.normal(size=(6, 4, 3, 3)).astype(np.float32))
    b = Variable(rng.normal(size=6).astype(np.float32))
    a = maxpool2(conv2d(x, k, b, 1, 1)).value
    c = maxpool2(conv2d(x, k, b, 1, 1)).value
    assert a.tobytes() == c.tobytes()


def test_dtype_is_preserved():
    assert conv2d(V(np.ones((1, 1, 4, 4))), V(np.ones((1, 1, 3, 3))), V(np.zeros(1)), 1, 1).dtype == np.float32
    x64 = Variable(np.ones((1, 1, 4, 4)))
    assert x64.dtype == np.float64
