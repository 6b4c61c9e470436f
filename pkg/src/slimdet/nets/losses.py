"""
Losses returning (value, d value / d output).

Detection targets follow the YOLOv3 convention: a ground-truth box is assigned to the
grid cell holding its center and to the anchor with the best shape IoU; the head predicts
sigmoid center offsets and log-space sizes relative to that anchor.
"""

import numpy as np

from src.slimdet.errors import ShapeMismatchError
from src.slimdet.nets.manifest import NUM_ANCHORS

# per-anchor channel order in the 18-channel head
TX, TY, TW, TH, OBJ, CLS = range(6)
CHANNELS_PER_ANCHOR = 6
NOOBJ_WEIGHT = 0.5


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    # log(1 + exp(-|z|)) form, stable for large |z|
    return np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against soft (possibly mixed) label rows."""
    logits = logits.reshape(logits.shape[0], -1)
    if targets.shape != logits.shape:
        raise ShapeMismatchError(f"targets {targets.shape} do not match logits {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    loss = float(-(targets * log_p).sum() / n)
    grad = (np.exp(log_p) * targets.sum(axis=1, keepdims=True) - targets) / n
    return loss, grad.astype(logits.dtype)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def shape_iou(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU of (w, h) pairs against anchors when both share a corner: (M, K)."""
    inter = np.minimum(wh[:, None, 0], anchors[None, :, 0]) * np.minimum(wh[:, None, 1], anchors[None, :, 1])
    union = wh[:, None, 0] * wh[:, None, 1] + anchors[None, :, 0] * anchors[None, :, 1] - inter
    return inter / np.maximum(union, 1e-12)


def build_targets(boxes: np.ndarray, weights: np.ndarray, anchors: np.ndarray, grid: int,
                  stride: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell targets (N, N, A, 4) and positive weights (N, N, A) for one image."""
    target = np.zeros((grid, grid, NUM_ANCHORS, 4))
    pos = np.zeros((grid, grid, NUM_ANCHORS))
    if len(boxes) == 0:
        return target, pos
    wh = np.maximum(boxes[:, 2:] - boxes[:, :2], 1e-3)
    centers = (boxes[:, :2] + boxes[:, 2:]) / 2.0
    best = shape_iou(wh, anchors).argmax(axis=1)
    for (cx, cy), (w, h), a, wt in zip(centers, wh, best, weights):
        gx = min(int(cx / stride), grid - 1)
        gy = min(int(cy / stride), grid - 1)
        # later boxes overwrite earlier ones in the same slot unless they carry less weight
        if pos[gy, gx, a] > wt:
            continue
        target[gy, gx, a] = (cx / stride - gx, cy / stride - gy,
                             np.log(w / anchors[a, 0]), np.log(h / anchors[a, 1]))
        pos[gy, gx, a] = wt
    return target, pos


def yolo_loss(pred: np.ndarray, boxes: list[np.ndarray], weights: list[np.ndarray],
              anchors: np.ndarray, stride: float) -> tuple[float, np.ndarray]:
    """Sum over cells and anchors, averaged over the batch; pred is (B, N, N, 18)."""
    b, grid, _, ch = pred.shape
    if ch != NUM_ANCHORS * CHANNELS_PER_ANCHOR or len(boxes) != b:
        raise ShapeMismatchError(f"head output {pred.shape} does not fit {len(boxes)} target sets")
    p = pred.reshape(b, grid, grid, NUM_ANCHORS, CHANNELS_PER_ANCHOR).astype(np.float64)
    grad = np.zeros_like(p)
    total = 0.0
    for i in range(b):
        target, pos = build_targets(boxes[i], weights[i], anchors, grid, stride)
        has = pos > 0
        z = p[i]
        g = grad[i]

        # objectness: positives pull to 1 with their weight, the rest push to 0
        obj_w = np.where(has, pos, NOOBJ_WEIGHT)
        obj_t = has.astype(np.float64)
        total += float((obj_w * _bce(z[..., OBJ], obj_t)).sum())
        g[..., OBJ] = obj_w * (sigmoid(z[..., OBJ]) - obj_t)
        if not has.any():
            continue

        w = pos[..., None]
        xy = z[..., [TX, TY]]
        total += float((w * _bce(xy, target[..., :2]) * has[..., None]).sum())
        g[..., [TX, TY]] = w * (sigmoid(xy) - target[..., :2]) * has[..., None]

        wh = z[..., [TW, TH]]
        diff = (wh - target[..., 2:]) * has[..., None]
        total += float((w * diff ** 2).sum())
        g[..., [TW, TH]] = 2.0 * w * diff

        total += float((pos * _bce(z[..., CLS], 1.0) * has).sum())
        g[..., CLS] = pos * (sigmoid(z[..., CLS]) - 1.0) * has
    return total / b, (grad / b).reshape(pred.shape).astype(pred.dtype)
