"""
Training-time schedules: linear warmup + cosine learning-rate decay, and mixup.

lr(t) = warmup_start + (lr0 - warmup_start) * t / warmup          for t < warmup
lr(t) = lr_min + 0.5 * (1 + cos(pi * t' / T')) * (lr0 - lr_min)   otherwise,
with t' = t - warmup and T' = total - warmup.
"""

import math

import numpy as np

from src.slimdet.config import LrSchedule, MixupConfig
from src.slimdet.errors import ScheduleError, ShapeMismatchError


def lr_at(t: int, s: LrSchedule) -> float:
    # t == total_batches is accepted and evaluates to the decay endpoint
    if t < 0 or t > s.total_batches:
        raise ScheduleError(f"batch index {t} outside [0, {s.total_batches}]")
    if t < s.warmup_batches:
        return s.warmup_start + (s.lr0 - s.warmup_start) * t / s.warmup_batches
    span = s.total_batches - s.warmup_batches
    if span == 0:
        return s.lr0
    progress = (t - s.warmup_batches) / span
    return s.lr_min + 0.5 * (1.0 + math.cos(math.pi * progress)) * (s.lr0 - s.lr_min)


# ---------- Mixup ----------

def sample_lambda(c: MixupConfig, rng: np.random.Generator) -> float:
    """Draw lambda ~ Beta(alpha, alpha)."""
    return float(np.clip(rng.beta(c.alpha, c.alpha), 0.0, 1.0))


def mixup(x_i: np.ndarray, y_i: np.ndarray, x_j: np.ndarray, y_j: np.ndarray,
          lam: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= lam <= 1.0:
        raise ScheduleError(f"mixup lambda {lam} outside [0, 1]")
    x_i, x_j, y_i, y_j = map(np.asarray, (x_i, x_j, y_i, y_j))
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise ShapeMismatchError(f"mixup operands differ: {x_i.shape}/{x_j.shape}, {y_i.shape}/{y_j.shape}")
    if lam == 1.0:
        return x_i.copy(), y_i.copy()
    if lam == 0.0:
        return x_j.copy(), y_j.copy()
    return lam * x_i + (1.0 - lam) * x_j, lam * y_i + (1.0 - lam) * y_j


def mixup_batch(x: np.ndarray, y: np.ndarray, c: MixupConfig,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Mix every example with a partner from a seeded permutation of the batch."""
    perm = rng.permutation(len(x))
    lam = sample_lambda(c, rng)
    x_mix, y_mix = mixup(x, y, x[perm], y[perm], lam)
    return x_mix.astype(x.dtype, copy=False), y_mix.astype(y.dtype, copy=False), lam, perm


def mixup_detection(boxes_i: np.ndarray, boxes_j: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Boxes cannot be interpolated coordinate-wise: take the union, weighted lam and 1 - lam."""
    if not 0.0 <= lam <= 1.0:
        raise ScheduleError(f"mixup lambda {lam} outside [0, 1]")
    boxes_i = np.asarray(boxes_i, dtype=np.float32).reshape(-1, 4)
    boxes_j = np.asarray(boxes_j, dtype=np.float32).reshape(-1, 4)
    weights = np.concatenate([np.full(len(boxes_i), lam), np.full(len(boxes_j), 1.0 - lam)]).astype(np.float32)
    boxes = np.concatenate([boxes_i, boxes_j], axis=0)
    keep = weights > 0
    return boxes[keep], weights[keep]
