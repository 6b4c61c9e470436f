"""
Dense tensor storage and the GEMM view of convolutional weights.

- Weights are float32 arrays laid out (F, C, KH, KW), row-major
- The GEMM view has rows = filters and cols = C*KH*KW (channel-major), so
  filter sparsity is row sparsity and channel/shape sparsity is column sparsity
- Compaction drops all-zero rows/columns and refuses to drop anything nonzero
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.slimdet.errors import (
    DivergenceError,
    IndexBoundsError,
    NonzeroDiscardError,
    ShapeMismatchError,
)

DTYPE = np.float32
BYTES_PER_PARAM = np.dtype(DTYPE).itemsize

# WeightTensor: np.ndarray of shape (F, C, KH, KW); GemmMatrix: 2-D np.ndarray.
WeightTensor = np.ndarray
GemmMatrix = np.ndarray


@dataclass(frozen=True)
class CompactedMatrix:
    dense: GemmMatrix
    row_index: np.ndarray
    col_index: np.ndarray
    original_shape: tuple[int, int]

    @property
    def density(self) -> float:
        rows, cols = self.original_shape
        return self.dense.size / float(rows * cols)


def weight_tensor(data: Sequence[float] | np.ndarray, shape: tuple[int, int, int, int]) -> WeightTensor:
    """Build a WeightTensor from flat data, validating the length and the shape."""
    if len(shape) != 4 or any(int(s) < 1 for s in shape):
        raise ShapeMismatchError(f"weight shape must be 4 positive counts, got {shape}")
    arr = np.asarray(data, dtype=DTYPE).reshape(-1)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ShapeMismatchError(f"data length {arr.size} does not match shape {shape} ({expected})")
    return _finite(arr.reshape(shape))


def _finite(a: np.ndarray) -> np.ndarray:
    if not np.isfinite(a).all():
        raise DivergenceError("non-finite entries in tensor")
    return a


# ---------- 4D <-> 2D ----------

def to_gemm(w: WeightTensor) -> GemmMatrix:
    """Row r is filter r flattened; element (r, c*KH*KW + i*KW + j) = w[r, c, i, j]."""
    if w.ndim != 4:
        raise ShapeMismatchError(f"expected a 4-D weight tensor, got {w.ndim}-D")
    return w.reshape(w.shape[0], -1)


def from_gemm(m: GemmMatrix, shape: tuple[int, int, int, int]) -> WeightTensor:
    f, c, kh, kw = (int(s) for s in shape)
    if m.ndim != 2 or m.shape[0] != f or m.size != f * c * kh * kw:
        raise ShapeMismatchError(f"cannot view {m.shape} matrix as weight tensor {tuple(shape)}")
    return m.reshape(f, c, kh, kw)


# ---------- GEMM ----------

def matmul(a: GemmMatrix, b: GemmMatrix) -> GemmMatrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"cannot multiply {a.shape} by {b.shape}")
    return _finite(a @ b)


def _check_index(index: Sequence[int], bound: int, what: str) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise IndexBoundsError(f"{what} index out of bounds [0, {bound})")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise IndexBoundsError(f"{what} index must be strictly increasing")
    return idx


def compact(m: GemmMatrix, keep_rows: Sequence[int], keep_cols: Sequence[int]) -> CompactedMatrix:
    """Keep only the listed rows/columns. Every dropped entry must be exactly zero."""
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got {m.ndim}-D")
    rows = _check_index(keep_rows, m.shape[0], "row")
    cols = _check_index(keep_cols, m.shape[1], "column")

    kept = np.zeros(m.shape, dtype=bool)
    kept[np.ix_(rows, cols)] = True
    dropped = np.count_nonzero(m[~kept])
    if dropped:
        raise NonzeroDiscardError(f"compaction would discard {dropped} nonzero entries")
    dense = np.ascontiguousarray(m[np.ix_(rows, cols)])
    return CompactedMatrix(dense=dense, row_index=rows, col_index=cols, original_shape=m.shape)


def compact_from_mask(m: GemmMatrix, mask: np.ndarray) -> CompactedMatrix:
    """Keep sets are the rows/columns that hold at least one retained mask entry."""
    if mask.shape != m.shape:
        raise ShapeMismatchError(f"mask {mask.shape} does not match matrix {m.shape}")
    keep = mask.astype(bool)
    return compact(m, np.flatnonzero(keep.any(axis=1)), np.flatnonzero(keep.any(axis=0)))


def expand(product: GemmMatrix, row_index: np.ndarray, rows: int) -> GemmMatrix:
    """Scatter a compacted product back to `rows` rows, zero-filling the pruned ones."""
    out = np.zeros((rows, product.shape[1]), dtype=product.dtype)
    out[row_index] = product
    return out


def compacted_matmul(c: CompactedMatrix, x: GemmMatrix) -> GemmMatrix:
    """Equivalent of `m @ x` computed on the dense block only."""
    rows, cols = c.original_shape
    if x.ndim != 2 or x.shape[0] != cols:
        raise ShapeMismatchError(f"cannot multiply {c.original_shape} by {x.shape}")
    return expand(matmul(c.dense, x[c.col_index]), c.row_index, rows)


# ---------- Activation lowering (desk-scale nets only) ----------

def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """(B, C, H, W) -> (B, C*kh*kw, H_out*W_out), rows ordered like the GEMM view columns."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    h_out, w_out = conv_output_hw(h, w, kh, kw, stride, 0)
    sb, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, h_out, w_out),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(b, c * kh * kw, h_out * w_out)


def col2im(cols: np.ndarray, x_shape: tuple[int, int, int, int], kh: int, kw: int,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of im2col: accumulate columns back into an image of `x_shape`."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out, w_out = conv_output_hw(hp, wp, kh, kw, stride, 0)
    x = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, h_out, w_out)
    for i in range(kh):
        i_end = i + stride * h_out
        for j in range(kw):
            j_end = j + stride * w_out
            x[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if padding:
        x = x[:, :, padding:padding + h, padding:padding + w]
    return x
