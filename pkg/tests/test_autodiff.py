"""
Tests for the reverse-mode autodiff engine
"""

import numpy as np
import pytest

from freqpcqa import autodiff as ad
from freqpcqa.autodiff import Parameter, Tensor
from freqpcqa.errors import ShapeError
from freqpcqa.gradcheck import OP_TOLERANCE, op_checks


@pytest.fixture(scope="module")
def op_results():
    return {r.name: r for r in op_checks(np.random.default_rng(0))}


# ==============================================================================
# Forward definitions
# ==============================================================================

def test_matmul_identity():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))

    out = ad.matmul(a, np.eye(2))

    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_conv2d_averaging_kernel():
    x = Tensor(np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3))
    kernel = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))

    out = ad.conv2d(x, kernel, padding=1)

    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == pytest.approx(4.0)
    assert out.data[0, 0, 0, 0] == pytest.approx((0 + 1 + 3 + 4) / 9.0)


def test_conv2d_stride_shape():
    x = Tensor(np.zeros((2, 3, 8, 8)))
    w = Tensor(np.zeros((5, 3, 3, 3)))

    assert ad.conv2d(x, w, stride=2, padding=1).shape == (2, 5, 4, 4)


def test_depthwise_matches_grouped_dense_conv():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = rng.normal(size=(3, 1, 3, 3))
    dense = np.zeros((3, 3, 3, 3))
    for c in range(3):
        dense[c, c] = w[c, 0]

    np.testing.assert_allclose(
        ad.depthwise_conv2d(x, Tensor(w), padding=1).data,
        ad.conv2d(x, Tensor(dense), padding=1).data,
        atol=1e-12,
    )


def test_avg_pool_counts_padding():
    x = Tensor(np.ones((1, 1, 4, 4)))

    out = ad.avg_pool2d(x, 3, 2, 1)

    assert out.shape == (1, 1, 2, 2)
    assert out.data[0, 0, 0, 0] == pytest.approx(4.0 / 9.0)
    assert out.data[0, 0, 1, 1] == pytest.approx(1.0)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(2).normal(size=(4, 7)) * 10)

    rows = ad.softmax(x, axis=-1).data.sum(axis=-1)

    np.testing.assert_allclose(rows, 1.0, atol=1e-6)


def test_relu_and_gelu():
    x = Tensor(np.array([-2.0, 0.0, 3.0]))

    np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 3.0])
    g = ad.gelu(x).data
    assert g[1] == 0.0
    assert g[2] == pytest.approx(3.0, abs=0.01)
    assert g[0] == pytest.approx(-0.0454, abs=1e-3)


def test_bilinear_sample_points():
    x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
    rows = Tensor(np.array([1.0, 1.5, -3.0]).reshape(1, 1, 1, 3))
    cols = Tensor(np.array([2.0, 0.5, 0.0]).reshape(1, 1, 1, 3))

    out = ad.bilinear_sample(x, rows, cols).data.reshape(-1)

    assert out[0] == pytest.approx(6.0)
    assert out[1] == pytest.approx((4 + 5 + 8 + 9) / 4.0)
    assert out[2] == 0.0, "locations off the map read zero"


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(3).normal(2.0, 3.0, size=(4, 16)))

    out = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data

    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-7)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)


def test_batch_norm_running_statistics():
    x = np.random.default_rng(4).normal(1.0, 2.0, size=(4, 2, 3, 3))
    running_mean, running_var = np.zeros(2), np.ones(2)

    ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                  running_mean, running_var, training=True)

    mu = x.mean(axis=(0, 2, 3))
    unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(running_mean, 0.1 * mu)
    np.testing.assert_allclose(running_var, 0.9 + 0.1 * unbiased)


def test_batch_norm_eval_uses_buffers():
    x = Tensor(np.full((1, 1, 2, 2), 5.0))

    out = ad.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                        np.array([1.0]), np.array([4.0]), training=False, eps=0.0)

    np.testing.assert_allclose(out.data, 2.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))

    a = ad.gelu(ad.conv2d(x, w, padding=1)).data
    b = ad.gelu(ad.conv2d(x, w, padding=1)).data

    assert np.array_equal(a, b)


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


# ==============================================================================
# Backward
# ==============================================================================

def test_quadratic_gradient():
    w = Parameter(np.array([1.0, 2.0]))

    ad.backward(ad.sum(w * w))

    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_gradient_of_constant_loss_is_zero():
    w = Parameter(np.array([1.0, -3.0]))

    ad.backward(ad.sum(w * 0.0) + 7.0)

    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_gradients_accumulate_until_zeroed():
    w = Parameter(np.array([1.0, 2.0]))
    loss = ad.sum(w * w)

    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_allclose(w.grad, [4.0, 8.0])

    w.zero_grad()
    loss.backward()
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_shared_input_visited_once():
    """x used by two branches receives the sum of both contributions"""
    x = Parameter(np.array([3.0]))
    y = x * 2.0
    loss = ad.sum(y * y + y)

    ad.backward(loss)

    np.testing.assert_allclose(x.grad, [2 * 2 * 6.0 + 2.0])


def test_backward_needs_scalar():
    w = Parameter(np.ones(3))

    with pytest.raises(ShapeError, match=r"\(3,\)"):
        ad.backward(w * 2.0)


def test_no_grad_records_nothing():
    w = Parameter(np.ones(2))
    with ad.no_grad():
        out = ad.sum(w * w)

    assert not out.requires_grad
    assert out.is_leaf
    assert ad.is_grad_enabled()


def test_relu_gradient():
    x = Parameter(np.array([-1.0, 2.0]))

    ad.backward(ad.sum(ad.relu(x)))

    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_slice_and_concat():
    a = Parameter(np.arange(10.0).reshape(2, 5))
    part = ad.slice(a, 1, 1, 4, 2)
    joined = ad.concat([part, a], axis=1)

    assert part.shape == (2, 2)
    np.testing.assert_array_equal(part.data, [[1, 3], [6, 8]])
    assert joined.shape == (2, 7)

    ad.backward(ad.sum(joined))
    np.testing.assert_array_equal(a.grad, [[1, 2, 1, 2, 1], [1, 2, 1, 2, 1]])


# ==============================================================================
# Shape errors
# ==============================================================================

def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_add_shape_error():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError, match="odd"):
        ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# ==============================================================================
# Finite-difference checks
# ==============================================================================

@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "div", "sum", "mean", "matmul", "linear", "gelu", "softmax",
    "reshape_transpose", "getitem_gather", "slice", "concat", "conv2d", "depthwise_conv2d",
    "avg_pool2d", "global_avg_pool", "bilinear_sample", "batch_norm", "batch_norm_eval",
    "layer_norm", "smooth_l1_loss", "deform_conv2d", "conv_norm_gelu_pool_linear",
])
def test_op_gradient(op_results, name):
    result = op_results[name]

    assert result.checked > 0
    assert result.tolerance == OP_TOLERANCE
    assert result.passed, f"{name}: max relative error {result.max_rel_error:.3e} ({result.worst})"
