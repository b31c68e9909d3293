import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from redkit.autodiff import (
    AdamState, Tensor, adam_step, batchnorm1d, conv1d, conv1d_transpose, dense, maxpool1d,
    relu, sigmoid, softmax_cross_entropy,
)
from redkit.autodiff.gradcheck import check_gradients
from redkit.errors import InvalidArchitectureError, NonFiniteError, ShapeError

from conftest import leaf


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def naive_conv(x, w, b, stride=1):
    c_out, _, k = w.shape
    n_out = (x.shape[-1] - k) // stride + 1
    y = np.zeros((c_out, n_out))
    for o in range(c_out):
        for t in range(n_out):
            y[o, t] = b[o] + np.sum(w[o] * x[:, t * stride:t * stride + k])
    return y


# conv1d

def test_conv1d_table_shape():
    y = conv1d(T(np.zeros((2, 1024))), T(np.zeros((64, 2, 10))), T(np.zeros(64)))
    assert y.shape == (64, 1015)


def test_conv1d_identity_kernel(rng):
    x = rng.standard_normal((1, 17))
    y = conv1d(T(x), T([[[1.0]]]), T([0.0]))
    np.testing.assert_array_equal(y.data, x)


def test_conv1d_zero_weights_constant_bias(rng):
    y = conv1d(T(rng.standard_normal((3, 12))), T(np.zeros((1, 3, 4))), T([3.5]))
    assert np.all(y.data == 3.5)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_matches_loop_definition(rng, stride):
    x = rng.standard_normal((3, 20))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(conv1d(T(x), T(w), T(b), stride=stride).data,
                               naive_conv(x, w, b, stride), atol=1e-12)


def test_conv1d_errors():
    with pytest.raises(ShapeError):
        conv1d(T(np.zeros((3, 10))), T(np.zeros((1, 2, 3))))
    with pytest.raises(InvalidArchitectureError):
        conv1d(T(np.zeros((2, 5))), T(np.zeros((1, 2, 10))))


# conv1d_transpose

def test_conv_transpose_length_formula():
    y = conv1d_transpose(T(np.zeros((1, 5))), T(np.zeros((1, 1, 3))), T([0.0]), stride=4)
    assert y.shape == (1, 19)


def test_conv_transpose_identity(rng):
    x = rng.standard_normal((1, 9))
    y = conv1d_transpose(T(x), T([[[1.0]]]), T([0.0]), stride=1)
    np.testing.assert_array_equal(y.data, x)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(1, 4),
       st.integers(1, 6), st.integers(0, 10**6))
def test_conv_adjoint_identity(c_in, c_out, k, stride, n_in, seed):
    rng = np.random.default_rng(seed)
    length = k + stride * (n_in - 1) + int(rng.integers(0, stride))
    w = rng.standard_normal((c_out, c_in, k))
    x = rng.standard_normal((c_in, length))
    y_shape = conv1d(T(x), T(w), stride=stride).shape
    y = rng.standard_normal(y_shape)
    lhs = np.sum(conv1d(T(x), T(w), stride=stride).data * y)
    xt = conv1d_transpose(T(y), T(w), stride=stride).data
    # transposed output may be shorter than x when the stride leaves a remainder
    rhs = np.sum(x[:, :xt.shape[1]] * xt)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# maxpool

def test_maxpool_simple():
    y, idx = maxpool1d(T([[1.0, 3.0, 2.0, 0.0]]))
    assert y.data.tolist() == [[3.0]] and idx.tolist() == [[1]]


def test_maxpool_first_occurrence_tie():
    y, idx = maxpool1d(T([[5.0, 5.0, 5.0, 5.0]]))
    assert y.data.tolist() == [[5.0]] and idx.tolist() == [[0]]


def test_maxpool_drops_remainder():
    y, _ = maxpool1d(T([[0.0, 1, 2, 3, 9, 9]]))
    assert y.shape == (1, 1) and y.data[0, 0] == 3.0


def test_maxpool_backward_routes_to_argmax():
    x = leaf([[1.0, 3.0, 2.0, 0.0, 7.0, 1.0, 1.0, 2.0]])
    y, _ = maxpool1d(x)
    y.backward(np.array([[10.0, 20.0]]))
    assert x.grad.tolist() == [[0, 10, 0, 0, 20, 0, 0, 0]]


def test_maxpool_too_short():
    with pytest.raises(InvalidArchitectureError):
        maxpool1d(T([[1.0, 2.0]]))


# batchnorm

def test_batchnorm_standardized_input_is_unchanged(rng):
    x = rng.standard_normal((4, 1, 256))
    x = (x - x.mean()) / x.std()
    y = batchnorm1d(T(x), T([1.0]), T([0.0]), training=True)
    # the only deviation is the epsilon inside the square root
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), atol=1e-12)
    np.testing.assert_allclose(y.data, x, rtol=1e-5, atol=1e-6)


def test_batchnorm_constant_channel_gives_zero():
    y = batchnorm1d(T(np.full((3, 2, 5), 4.2)), T([1.0, 1.0]), T([0.0, 0.0]), training=True)
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_batchnorm_eval_is_affine(rng):
    x = rng.standard_normal((2, 2, 6))
    g, b = np.array([2.0, -1.0]), np.array([0.5, 3.0])
    y = batchnorm1d(T(x), T(g), T(b), training=False, running_mean=np.zeros(2),
                    running_var=np.ones(2))
    expect = g[None, :, None] * x / np.sqrt(1 + 1e-5) + b[None, :, None]
    np.testing.assert_allclose(y.data, expect, atol=1e-12)


def test_batchnorm_running_stats_momentum(rng):
    x = rng.standard_normal((4, 1, 8)) * 3 + 2
    rm, rv = np.zeros(1), np.ones(1)
    batchnorm1d(T(x), T([1.0]), T([0.0]), training=True, running_mean=rm, running_var=rv)
    np.testing.assert_allclose(rm, 0.1 * x.mean())
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_needs_two_values():
    with pytest.raises(ShapeError):
        batchnorm1d(T(np.zeros((1, 1, 1))), T([1.0]), T([0.0]), training=True)


# dense / activations / CE

def test_dense_identity_and_bias(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(dense(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)
    b = rng.standard_normal(5)
    y = dense(T(np.zeros((2, 4))), T(rng.standard_normal((5, 4))), T(b))
    np.testing.assert_array_equal(y.data, np.tile(b, (2, 1)))


def test_dense_gradcheck(rng):
    args = [leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((2, 4))),
            leaf(rng.standard_normal(2))]
    assert check_gradients(dense, args) < 1e-6


def test_relu_and_sigmoid_values(rng):
    assert relu(T([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    assert sigmoid(T([0.0])).data[0] == 0.5
    x = rng.standard_normal(50) * 5
    np.testing.assert_allclose(sigmoid(T(x)).data + sigmoid(T(-x)).data, 1.0, atol=1e-15)


def test_sigmoid_strictly_open_interval():
    s = sigmoid(T([-1000.0, 1000.0])).data
    assert 0.0 < s[0] and s[1] < 1.0


def test_cross_entropy_uniform_logits():
    for k in (2, 5, 10):
        loss = softmax_cross_entropy(T(np.zeros((3, k))), np.array([0, 1, k - 1]))
        assert loss.item() == pytest.approx(np.log(k), abs=1e-12)


def test_cross_entropy_confident():
    assert softmax_cross_entropy(T([[30.0, -30.0]]), np.array([0])).item() < 1e-20


def test_cross_entropy_gradient(rng):
    z = leaf(rng.standard_normal((4, 3)))
    labels = np.array([0, 2, 1, 2])
    softmax_cross_entropy(z, labels).backward()
    p = np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True)
    np.testing.assert_allclose(z.grad, (p - np.eye(3)[labels]) / 4, atol=1e-12)
    assert check_gradients(lambda t: softmax_cross_entropy(t, labels), [z]) < 1e-5


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(T(np.zeros((1, 3))), np.array([3]))


# Adam

def test_adam_first_step_is_lr_sign():
    g = np.array([0.3, -7.0, 0.05])
    new, state = adam_step(np.zeros(3), g, AdamState.zeros_like(np.zeros(3)), lr=0.01)
    np.testing.assert_allclose(np.abs(new), 0.01, atol=1e-6 * 0.01)
    np.testing.assert_array_equal(np.sign(new), -np.sign(g))
    assert state.step_count == 1


def test_adam_zero_grad_no_move():
    p = np.array([1.0, -2.0])
    new, _ = adam_step(p, np.zeros(2), AdamState.zeros_like(p), lr=0.1)
    np.testing.assert_array_equal(new, p)


def test_adam_deterministic_and_counts(rng):
    p0 = rng.standard_normal(5)
    grads = rng.standard_normal((4, 5))

    def run():
        p, s = p0, AdamState.zeros_like(p0)
        counts = []
        for g in grads:
            p, s = adam_step(p, g, s, 1e-2)
            counts.append(s.step_count)
        return p, counts

    (a, ca), (b, _) = run(), run()
    np.testing.assert_array_equal(a, b)
    assert ca == [1, 2, 3, 4]


def test_adam_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), AdamState.zeros_like(np.zeros(2)), 1e-3)


# engine

def test_nan_is_detected():
    with pytest.raises(NonFiniteError):
        dense(T([[np.inf]]), T([[1.0]]), T([0.0]))


def test_forward_is_pure(rng):
    x, w = rng.standard_normal((2, 2, 30)), rng.standard_normal((4, 2, 10))
    a = conv1d(T(x), T(w)).data
    b = conv1d(T(x), T(w)).data
    assert a.tobytes() == b.tobytes()


def test_shared_subgraph_accumulates():
    x = leaf([2.0])
    y = x * 3.0 + x * 4.0
    y.backward(np.ones(1))
    assert x.grad.tolist() == [7.0]
