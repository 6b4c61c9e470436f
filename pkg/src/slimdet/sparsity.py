"""
Euclidean projections onto per-layer sparsity sets.

All projections act on the GEMM view (rows = filters, cols = C*KH*KW).
Groups are ranked by l2 norm (elements by magnitude); ties go to the lower index.
Masks are boolean arrays congruent with the matrix, True = retained.
"""

import math
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.slimdet.errors import AlphaRangeError, ShapeMismatchError

SparsityMask = np.ndarray


class SparsityMode(str, Enum):
    irregular = "irregular"
    filter = "filter"
    column = "column"
    combined = "combined"


class SparsityConstraint(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: SparsityMode
    alpha_filters: Optional[int] = Field(default=None, ge=0)
    alpha_columns: Optional[int] = Field(default=None, ge=0)
    alpha_weights: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _required_alphas(self) -> "SparsityConstraint":
        needed = {
            SparsityMode.irregular: ("alpha_weights",),
            SparsityMode.filter: ("alpha_filters",),
            SparsityMode.column: ("alpha_columns",),
            SparsityMode.combined: ("alpha_filters", "alpha_columns"),
        }[self.mode]
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.mode.value} constraint requires {', '.join(missing)}")
        return self

    def check_fits(self, rows: int, cols: int) -> None:
        """Raise AlphaRangeError if an alpha exceeds the layer's dimension."""
        limits = (("alpha_filters", rows), ("alpha_columns", cols), ("alpha_weights", rows * cols))
        for name, bound in limits:
            value = getattr(self, name)
            if value is not None and value > bound:
                raise AlphaRangeError(f"{name}={value} exceeds layer dimension {bound}")


# ---------- Helpers ----------

def _check_alpha(alpha: int, bound: int, what: str) -> int:
    alpha = int(alpha)
    if alpha < 0 or alpha > bound:
        raise AlphaRangeError(f"{what} alpha={alpha} outside [0, {bound}]")
    return alpha


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties to the lower index, returned ascending."""
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def _group_norms(m: np.ndarray, axis: int) -> np.ndarray:
    # float64 so the ranking does not depend on float32 accumulation order
    return np.sqrt(np.square(m, dtype=np.float64).sum(axis=axis))


def _check_2d(m: np.ndarray) -> None:
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a GEMM matrix, got {m.ndim}-D array")


# ---------- Projections ----------

def _irregular(m: np.ndarray, alpha: int) -> tuple[np.ndarray, SparsityMask]:
    _check_2d(m)
    alpha = _check_alpha(alpha, m.size, "weight")
    keep = np.zeros(m.size, dtype=bool)
    keep[_top_k(np.abs(m.astype(np.float64)).ravel(), alpha)] = True
    mask = keep.reshape(m.shape)
    return apply_mask(m, mask), mask


def project_irregular(m: np.ndarray, alpha: int) -> np.ndarray:
    """Keep the `alpha` largest-magnitude entries verbatim; zero the rest."""
    return _irregular(m, alpha)[0]


def project_filters(m: np.ndarray, alpha: int) -> tuple[np.ndarray, SparsityMask]:
    _check_2d(m)
    alpha = _check_alpha(alpha, m.shape[0], "filter")
    rows = np.zeros(m.shape[0], dtype=bool)
    rows[_top_k(_group_norms(m, axis=1), alpha)] = True
    mask = np.broadcast_to(rows[:, None], m.shape).copy()
    return apply_mask(m, mask), mask


def project_columns(m: np.ndarray, alpha: int) -> tuple[np.ndarray, SparsityMask]:
    _check_2d(m)
    alpha = _check_alpha(alpha, m.shape[1], "column")
    cols = np.zeros(m.shape[1], dtype=bool)
    cols[_top_k(_group_norms(m, axis=0), alpha)] = True
    mask = np.broadcast_to(cols[None, :], m.shape).copy()
    return apply_mask(m, mask), mask


def project_columns_within(m: np.ndarray, row_mask: SparsityMask, alpha: int) -> tuple[np.ndarray, SparsityMask]:
    """Column projection on the row-masked matrix; the result mask is row AND column."""
    masked = apply_mask(m, row_mask)
    projected, col_mask = project_columns(masked, alpha)
    return projected, col_mask & row_mask.astype(bool)


def project_combined(m: np.ndarray, c: SparsityConstraint) -> tuple[np.ndarray, SparsityMask]:
    """Filter projection first, then column projection over the surviving rows."""
    if c.mode is not SparsityMode.combined:
        raise AlphaRangeError(f"project_combined needs a combined constraint, got {c.mode.value}")
    _, row_mask = project_filters(m, c.alpha_filters)
    return project_columns_within(m, row_mask, c.alpha_columns)


def project(m: np.ndarray, c: SparsityConstraint) -> tuple[np.ndarray, SparsityMask]:
    """Dispatch on the constraint's mode; returns the projected matrix and its mask."""
    if c.mode is SparsityMode.irregular:
        return _irregular(m, c.alpha_weights)
    if c.mode is SparsityMode.filter:
        return project_filters(m, c.alpha_filters)
    if c.mode is SparsityMode.column:
        return project_columns(m, c.alpha_columns)
    return project_combined(m, c)


def mask_for(m: np.ndarray, c: SparsityConstraint) -> SparsityMask:
    return project(m, c)[1]


def apply_mask(m: np.ndarray, mask: SparsityMask) -> np.ndarray:
    if mask.shape != m.shape:
        raise ShapeMismatchError(f"mask {mask.shape} does not match matrix {m.shape}")
    return np.where(mask.astype(bool), m, np.zeros_like(m))


# ---------- Mask structure ----------

def row_keep(mask: SparsityMask) -> np.ndarray:
    return np.flatnonzero(np.asarray(mask, dtype=bool).any(axis=1))


def col_keep(mask: SparsityMask) -> np.ndarray:
    return np.flatnonzero(np.asarray(mask, dtype=bool).any(axis=0))


def check_mask_structure(mask: SparsityMask, mode: SparsityMode,
                         constraint: Optional[SparsityConstraint] = None) -> bool:
    """True iff the mask has the group structure of `mode` (and the retained counts, if given)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        return False
    rows, cols = mask.any(axis=1), mask.any(axis=0)
    if mode is SparsityMode.irregular:
        ok = True
    elif mode is SparsityMode.filter:
        ok = bool(np.all(mask.all(axis=1) | ~rows))
    elif mode is SparsityMode.column:
        ok = bool(np.all(mask.all(axis=0) | ~cols))
    else:
        ok = bool(np.array_equal(mask, np.outer(rows, cols)))
    if not ok or constraint is None:
        return ok
    # zero-norm groups may be retained, so counts are compared on the mask, not the weights
    if mode is SparsityMode.irregular:
        return int(mask.sum()) == constraint.alpha_weights
    if mode is SparsityMode.filter:
        return int(rows.sum()) == constraint.alpha_filters
    if mode is SparsityMode.column:
        return int(cols.sum()) == constraint.alpha_columns
    return int(rows.sum()) == constraint.alpha_filters and int(cols.sum()) == constraint.alpha_columns


def is_feasible(m: np.ndarray, c: SparsityConstraint) -> bool:
    """Direct count of nonzero groups against the constraint's alphas."""
    nz = m != 0
    if c.mode is SparsityMode.irregular:
        return int(nz.sum()) <= c.alpha_weights
    nz_rows, nz_cols = int(nz.any(axis=1).sum()), int(nz.any(axis=0).sum())
    if c.mode is SparsityMode.filter:
        return nz_rows <= c.alpha_filters
    if c.mode is SparsityMode.column:
        return nz_cols <= c.alpha_columns
    return nz_rows <= c.alpha_filters and nz_cols <= c.alpha_columns


# ---------- Ratios -> counts ----------

def retained_count(retention: float, dimension: int) -> int:
    """floor(retention * dimension), at least 1 when retention > 0."""
    if retention < 0 or retention > 1:
        raise AlphaRangeError(f"retention ratio {retention} outside [0, 1]")
    if retention == 0:
        return 0
    return max(1, math.floor(retention * dimension + 1e-9))


def constraint_from_ratios(rows: int, cols: int, mode: SparsityMode, filter_ratio: float = 1.0,
                           column_ratio: float = 1.0, weight_ratio: float = 1.0) -> SparsityConstraint:
    """Ratios are compression factors (2.0 keeps half of the groups)."""
    for name, r in (("filter_ratio", filter_ratio), ("column_ratio", column_ratio), ("weight_ratio", weight_ratio)):
        if r < 1:
            raise AlphaRangeError(f"{name}={r} must be >= 1")
    alpha_f = retained_count(1.0 / filter_ratio, rows)
    alpha_c = retained_count(1.0 / column_ratio, cols)
    alpha_w = retained_count(1.0 / weight_ratio, rows * cols)
    if mode is SparsityMode.irregular:
        return SparsityConstraint(mode=mode, alpha_weights=alpha_w)
    if mode is SparsityMode.filter:
        return SparsityConstraint(mode=mode, alpha_filters=alpha_f)
    if mode is SparsityMode.column:
        return SparsityConstraint(mode=mode, alpha_columns=alpha_c)
    return SparsityConstraint(mode=mode, alpha_filters=alpha_f, alpha_columns=alpha_c)


def full_constraint(rows: int, cols: int, mode: SparsityMode) -> SparsityConstraint:
    """Constraint that retains everything (identity projection)."""
    return constraint_from_ratios(rows, cols, mode)
