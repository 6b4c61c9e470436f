"""
Average precision over IoU threshold sweeps.

Per image, predictions are visited highest score first; each takes the unmatched ground
truth it overlaps most and counts as a true positive when that IoU exceeds the threshold.
AP is the area under the interpolated precision/recall curve (all-point by default,
11-point on request) and mAP is the mean over images in id order.
"""

from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, field_validator

from src.slimdet.config import DEFAULT_THRESHOLDS
from src.slimdet.metrics.boxes import iou_matrix
from src.slimdet.nets.data import read_boxes_jsonl, write_boxes_jsonl

Interpolation = Literal["all_point", "eleven_point"]


class EvalSweep(BaseModel):
    thresholds: list[float]
    values: list[float]
    interpolation: Interpolation = "all_point"

    @field_validator("thresholds")
    @classmethod
    def _increasing(cls, v: list[float]) -> list[float]:
        if any(t < 0 or t > 1 for t in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("thresholds must be strictly increasing within [0, 1]")
        return v

    def at(self, threshold: float) -> float:
        for t, v in zip(self.thresholds, self.values):
            if abs(t - threshold) < 1e-9:
                return v
        raise KeyError(threshold)

    def as_row(self) -> dict[str, float]:
        return {f"{t:.2f}": v for t, v in zip(self.thresholds, self.values)}


def average_precision(recall: np.ndarray, precision: np.ndarray,
                      interpolation: Interpolation = "all_point") -> float:
    if interpolation == "eleven_point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = recall >= t
            ap += (precision[above].max() if above.any() else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # precision envelope
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_image(preds: np.ndarray, truths: np.ndarray, threshold: float) -> np.ndarray:
    """True-positive flags for `preds` sorted by descending score."""
    tp = np.zeros(len(preds), dtype=bool)
    if len(preds) == 0 or len(truths) == 0:
        return tp
    overlaps = iou_matrix(preds, truths)
    taken = np.zeros(len(truths), dtype=bool)
    for i in range(len(preds)):
        candidates = np.where(taken, -1.0, overlaps[i])
        j = int(np.argmax(candidates))
        if candidates[j] > threshold:
            taken[j] = True
            tp[i] = True
    return tp


def image_ap(preds: np.ndarray, truths: np.ndarray, threshold: float,
             interpolation: Interpolation = "all_point") -> float:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 5) if len(preds) else np.zeros((0, 5))
    truths = np.asarray(truths, dtype=np.float64).reshape(-1, 4) if len(truths) else np.zeros((0, 4))
    if len(truths) == 0:
        return 1.0 if len(preds) == 0 else 0.0
    if len(preds) == 0:
        return 0.0
    preds = preds[np.argsort(-preds[:, 4], kind="stable")]
    tp = match_image(preds, truths, threshold)
    hits = np.cumsum(tp)
    recall = hits / len(truths)
    precision = hits / np.arange(1, len(preds) + 1)
    return average_precision(recall, precision, interpolation)


def _image_ids(preds: Mapping[int, np.ndarray], truths: Mapping[int, np.ndarray]) -> list[int]:
    return sorted(set(preds) | set(truths))


def map_at(preds: Mapping[int, np.ndarray], truths: Mapping[int, np.ndarray], threshold: float,
           interpolation: Interpolation = "all_point") -> float:
    """Mean per-image AP; an image missing from `preds` has no detections."""
    ids = _image_ids(preds, truths)
    if not ids:
        return 1.0
    empty5, empty4 = np.zeros((0, 5)), np.zeros((0, 4))
    aps = [image_ap(preds.get(i, empty5), truths.get(i, empty4), threshold, interpolation) for i in ids]
    return float(np.mean(aps))


def map_sweep(preds: Mapping[int, np.ndarray], truths: Mapping[int, np.ndarray],
              thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
              interpolation: Interpolation = "all_point") -> EvalSweep:
    values = [map_at(preds, truths, t, interpolation) for t in thresholds]
    return EvalSweep(thresholds=list(thresholds), values=values, interpolation=interpolation)


# ---------- Interchange files ----------

def save_predictions(path: str | Path, preds: Mapping[int, np.ndarray]) -> None:
    write_boxes_jsonl(Path(path), [{"image_id": i, "boxes": np.asarray(preds[i]).tolist()} for i in sorted(preds)])


def load_predictions(path: str | Path) -> dict[int, np.ndarray]:
    """Records without a score column get score 1.0."""
    out = {}
    for i, rows in read_boxes_jsonl(Path(path)).items():
        if rows.shape[1] == 4:
            rows = np.hstack([rows, np.ones((len(rows), 1))])
        out[i] = rows
    return out


def load_truths(path: str | Path) -> dict[int, np.ndarray]:
    """Ground-truth records carry exactly four corners and no score."""
    return read_boxes_jsonl(Path(path), widths=(4,))
