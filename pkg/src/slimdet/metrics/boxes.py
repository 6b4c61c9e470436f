"""
Axis-aligned boxes, IoU, head decoding and non-maximum suppression.

Box arrays are (n, 4) [x_min, y_min, x_max, y_max] in pixels; detections append a score
column, (n, 5).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.slimdet.errors import BoxError, ShapeMismatchError
from src.slimdet.nets.losses import CHANNELS_PER_ANCHOR, CLS, OBJ, TH, TW, TX, TY, sigmoid
from src.slimdet.nets.manifest import NUM_ANCHORS

MAX_LOG_SIZE = 8.0


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: Optional[float] = None

    def __post_init__(self) -> None:
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise BoxError(f"box corners out of order: {self}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise BoxError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _as_boxes(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4))
    return arr.reshape(-1, arr.shape[-1])[:, :4]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, >=4) and (m, >=4) box arrays."""
    a, b = _as_boxes(a), _as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# ---------- Head decoding ----------

def decode_head(pred: np.ndarray, anchors: np.ndarray, stride: float,
                conf_threshold: float = 0.0) -> np.ndarray:
    """One image's (N, N, 18) head output -> (k, 5) detections scored sigma(obj) * sigma(cls)."""
    grid = pred.shape[0]
    if pred.shape != (grid, grid, NUM_ANCHORS * CHANNELS_PER_ANCHOR):
        raise ShapeMismatchError(f"expected (N, N, 18) head output, got {pred.shape}")
    p = pred.reshape(grid, grid, NUM_ANCHORS, CHANNELS_PER_ANCHOR).astype(np.float64)
    gy, gx = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    cx = (sigmoid(p[..., TX]) + gx[..., None]) * stride
    cy = (sigmoid(p[..., TY]) + gy[..., None]) * stride
    w = anchors[:, 0] * np.exp(np.clip(p[..., TW], -MAX_LOG_SIZE, MAX_LOG_SIZE))
    h = anchors[:, 1] * np.exp(np.clip(p[..., TH], -MAX_LOG_SIZE, MAX_LOG_SIZE))
    score = sigmoid(p[..., OBJ]) * sigmoid(p[..., CLS])
    dets = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, score], axis=-1).reshape(-1, 5)
    return dets[dets[:, 4] >= conf_threshold]


def nms(dets: np.ndarray, iou_threshold: float = 0.45) -> np.ndarray:
    """Greedy NMS; survivors are returned highest score first (ties keep input order)."""
    if len(dets) == 0:
        return np.zeros((0, 5))
    order = np.argsort(-dets[:, 4], kind="stable")
    dets = dets[order]
    overlaps = iou_matrix(dets, dets)
    keep = np.ones(len(dets), dtype=bool)
    for i in range(len(dets)):
        if keep[i]:
            keep[i + 1:] &= overlaps[i, i + 1:] <= iou_threshold
    return dets[keep]
