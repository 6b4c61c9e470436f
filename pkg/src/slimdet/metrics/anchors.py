"""
Anchor priors by k-means over ground-truth (w, h) pairs.

Distance is 1 - IoU with every box anchored at a common corner; `metric="euclidean"`
switches to plain distance on (w, h). Centers come back sorted by area, ascending.
"""

import logging
from typing import Literal

import numpy as np

from src.slimdet.errors import InsufficientDataError
from src.slimdet.nets.losses import shape_iou

log = logging.getLogger(__name__)

# 9 priors in (w, h) pixels for 320x320 chest radiographs, smallest first
DEFAULT_ANCHORS = np.array(
    [(40, 39), (63, 49), (48, 69), (75, 74), (58, 102), (83, 108), (67, 148), (89, 154), (94, 202)],
    dtype=np.float64,
)
NUM_SCALES = 3


def _distance(boxes: np.ndarray, centers: np.ndarray, metric: str) -> np.ndarray:
    if metric == "iou":
        return 1.0 - shape_iou(boxes, centers)
    return np.sqrt(((boxes[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1))


def sort_by_area(centers: np.ndarray) -> np.ndarray:
    return centers[np.argsort(centers[:, 0] * centers[:, 1], kind="stable")]


def kmeans_anchors(boxes: np.ndarray, k: int = 9, seed: int = 0,
                   metric: Literal["iou", "euclidean"] = "iou", max_iter: int = 300) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if k < 1 or len(boxes) < k:
        raise InsufficientDataError(f"need at least k={k} boxes, got {len(boxes)}")
    rng = np.random.default_rng(seed)
    centers = boxes[np.sort(rng.choice(len(boxes), size=k, replace=False))].copy()
    assign = np.full(len(boxes), -1)
    for it in range(max_iter):
        dist = _distance(boxes, centers, metric)
        new_assign = dist.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        # far-away boxes re-seed empty clusters, farthest first
        far = np.argsort(-dist[np.arange(len(boxes)), assign], kind="stable")
        used = 0
        for c in range(k):
            members = boxes[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            else:
                centers[c] = boxes[far[used]]
                used += 1
    else:
        log.warning("k-means stopped at the iteration cap (%d) before assignments settled", max_iter)
    return sort_by_area(centers)


def group_anchors(centers: np.ndarray) -> list[np.ndarray]:
    """Split area-sorted centers into 3 scales, smallest scale first."""
    centers = sort_by_area(np.asarray(centers, dtype=np.float64).reshape(-1, 2))
    if len(centers) % NUM_SCALES:
        raise InsufficientDataError(f"{len(centers)} centers do not split into {NUM_SCALES} scales")
    return np.split(centers, NUM_SCALES)
