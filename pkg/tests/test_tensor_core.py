import numpy as np
import pytest

from src.slimdet.errors import DivergenceError, IndexBoundsError, NonzeroDiscardError, ShapeMismatchError
from src.slimdet.tensor_core import (
    col2im,
    compact,
    compact_from_mask,
    compacted_matmul,
    expand,
    from_gemm,
    im2col,
    matmul,
    to_gemm,
    weight_tensor,
)


def test_to_gemm_small_cases():
    assert to_gemm(weight_tensor([5.0], (1, 1, 1, 1))).tolist() == [[5.0]]
    assert to_gemm(weight_tensor([1, 2, 3, 4], (2, 1, 1, 2))).tolist() == [[1, 2], [3, 4]]


def test_gemm_round_trip_is_bit_exact():
    w = np.random.default_rng(0).normal(size=(3, 2, 3, 3)).astype(np.float32)
    m = to_gemm(w)
    assert m.shape == (3, 18)
    assert m[1, 1 * 9 + 2 * 3 + 1] == w[1, 1, 2, 1]
    assert np.array_equal(from_gemm(m, w.shape), w)


def test_from_gemm_flattens_row_major():
    assert from_gemm(np.array([[5.0]]), (1, 1, 1, 1)).ravel().tolist() == [5.0]
    assert from_gemm(np.array([[1.0, 2.0], [3.0, 4.0]]), (2, 1, 1, 2)).ravel().tolist() == [1, 2, 3, 4]
    with pytest.raises(ShapeMismatchError):
        from_gemm(np.zeros((2, 3)), (2, 1, 1, 2))


def test_weight_tensor_validates_length_and_values():
    with pytest.raises(ShapeMismatchError):
        weight_tensor([1.0, 2.0, 3.0], (2, 1, 1, 2))
    with pytest.raises(ShapeMismatchError):
        weight_tensor([1.0], (1, 1, 1))
    with pytest.raises(DivergenceError):
        weight_tensor([1.0, float("nan")], (2, 1, 1, 1))


def test_matmul_hand_cases():
    assert matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]])).tolist() == [[3.0], [7.0]]
    b = np.random.default_rng(1).normal(size=(3, 5))
    assert np.array_equal(matmul(np.eye(3), b), b)
    assert np.array_equal(matmul(b, np.eye(5)), b)
    with pytest.raises(ShapeMismatchError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_matches_naive_triple_loop():
    # small integers: every partial sum is exact, so summation order cannot matter
    rng = np.random.default_rng(2)
    a = rng.integers(-8, 9, size=(8, 16)).astype(np.float64)
    b = rng.integers(-8, 9, size=(16, 4)).astype(np.float64)
    naive = np.zeros((8, 4))
    for i in range(8):
        for j in range(4):
            for k in range(16):
                naive[i, j] += a[i, k] * b[k, j]
    assert np.array_equal(matmul(a, b), naive)


def test_compact_keeps_listed_rows_and_columns():
    m = np.array([[3.0, 0.0, 4.0], [0.0, 0.0, 0.0]])
    c = compact(m, [0], [0, 2])
    assert c.dense.tolist() == [[3.0, 4.0]]
    assert c.original_shape == (2, 3)
    assert c.density == pytest.approx(2 / 6)

    full = compact(m, [0, 1], [0, 1, 2])
    assert np.array_equal(full.dense, m)


def test_compact_refuses_to_drop_nonzeros():
    m = np.array([[3.0, 1.0, 4.0], [0.0, 0.0, 0.0]])
    with pytest.raises(NonzeroDiscardError):
        compact(m, [0], [0, 2])


@pytest.mark.parametrize("rows, cols", [([0, 5], [0]), ([1, 0], [0]), ([0], [-1]), ([0, 0], [0])])
def test_compact_rejects_bad_indices(rows, cols):
    with pytest.raises(IndexBoundsError):
        compact(np.zeros((2, 3)), rows, cols)


def test_compacted_matmul_equals_dense_product():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(6, 10))
    mask = np.outer(rng.random(6) < 0.5, rng.random(10) < 0.6)
    m = np.where(mask, m, 0.0)
    x = rng.normal(size=(10, 7))
    c = compact_from_mask(m, mask)
    assert np.allclose(compacted_matmul(c, x), m @ x, rtol=1e-12, atol=1e-12)


def test_expand_zero_fills_pruned_rows():
    out = expand(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0, 2]), 4)
    assert out.tolist() == [[1, 2], [0, 0], [3, 4], [0, 0]]


def _naive_conv(x, w, stride, padding):
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


@pytest.mark.parametrize("stride, padding", [(1, 0), (1, 1), (2, 1)])
def test_im2col_lowers_convolution_to_gemm(stride, padding):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    cols = im2col(x, 3, 3, stride, padding)
    out = np.matmul(to_gemm(w), cols)
    expected = _naive_conv(x, w, stride, padding)
    assert np.allclose(out.reshape(expected.shape), expected)


def test_col2im_is_the_adjoint_of_im2col():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 8, 8))
    cols = im2col(x, 3, 3, 2, 1)
    y = rng.normal(size=cols.shape)
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x * col2im(y, x.shape, 3, 3, 2, 1)))
    assert lhs == pytest.approx(rhs, rel=1e-10)
