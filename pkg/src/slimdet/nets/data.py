"""
Synthetic datasets and their on-disk format.

- classification: four pattern classes (horizontal bar, vertical bar, diagonal, square blob) on noise
- detection: 1-3 bright rectangles on noise, boxes in pixel coordinates
- disk: `images.bin` (little-endian float32) + `images.json` sidecar (shape, labels)
  + `boxes.jsonl` (one record per image: {image_id, boxes: [[x_min, y_min, x_max, y_max]]})
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np

from src.slimdet.errors import ArchiveError, BoxError
from src.slimdet.fileio import atomic_write

NUM_PATTERNS = 4
NOISE = 0.25
BLOB_DTYPE = np.dtype("<f4")


@dataclass
class Dataset:
    kind: Literal["classify", "detect"]
    images: np.ndarray                      # (n, 1, H, W) float32
    labels: Optional[np.ndarray] = None     # classify: (n,) int
    boxes: list[np.ndarray] = field(default_factory=list)  # detect: per image (m, 4)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return NUM_PATTERNS if self.kind == "classify" else 1

    def all_box_sizes(self) -> np.ndarray:
        sizes = [b[:, 2:] - b[:, :2] for b in self.boxes if len(b)]
        return np.concatenate(sizes) if sizes else np.zeros((0, 2))


# ---------- Generation ----------

def _pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float32)
    lo, hi = 2, size - 3
    if label == 0:
        r = rng.integers(lo, hi)
        img[r:r + 2, lo:hi + 1] = 1.0
    elif label == 1:
        c = rng.integers(lo, hi)
        img[lo:hi + 1, c:c + 2] = 1.0
    elif label == 2:
        off = rng.integers(-2, 3)
        for i in range(size):
            j = i + off
            if 0 <= j < size:
                img[i, j] = 1.0
                if j + 1 < size:
                    img[i, j + 1] = 1.0
    else:
        r, c = rng.integers(lo, max(lo + 1, hi - 3), size=2)
        img[r:r + 5, c:c + 5] = 1.0
    return img


def make_classification(n: int, image_size: int = 16, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, NUM_PATTERNS, size=n)
    images = np.stack([_pattern(int(y), image_size, rng) for y in labels])
    images += rng.normal(0.0, NOISE, size=images.shape).astype(np.float32)
    return Dataset(kind="classify", images=images[:, None].astype(np.float32), labels=labels.astype(np.int64))


def make_detection(n: int, image_size: int = 96, seed: int = 0, max_objects: int = 3) -> Dataset:
    rng = np.random.default_rng(seed)
    images = rng.normal(0.0, NOISE, size=(n, 1, image_size, image_size)).astype(np.float32)
    lo, hi = max(4, image_size // 8), max(6, image_size // 2)
    boxes = []
    for img in images:
        found = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            w, h = rng.integers(lo, hi, size=2)
            x0 = int(rng.integers(0, image_size - w))
            y0 = int(rng.integers(0, image_size - h))
            img[0, y0:y0 + h, x0:x0 + w] += 1.0
            found.append((x0, y0, x0 + w, y0 + h))
        boxes.append(np.asarray(found, dtype=np.float32))
    return Dataset(kind="detect", images=images, boxes=boxes)


def make_dataset(kind: str, n: int, image_size: int, seed: int) -> Dataset:
    if kind == "classify":
        return make_classification(n, image_size, seed)
    return make_detection(n, image_size, seed)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches covering every example once; the last one may be short."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batch_count(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# ---------- Disk format ----------

def write_boxes_jsonl(path: Path, records: list[dict]) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    atomic_write(path, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))


def _check_rows(rows: np.ndarray, widths: tuple[int, ...], where: str) -> np.ndarray:
    if rows.shape == (0,):
        return np.zeros((0, widths[0]))
    if rows.ndim != 2 or rows.shape[1] not in widths:
        raise BoxError(f"{where}: boxes must be rows of {' or '.join(map(str, widths))} numbers, got shape {rows.shape}")
    if not np.isfinite(rows).all():
        raise BoxError(f"{where}: non-finite box coordinate")
    bad = np.flatnonzero((rows[:, 2] < rows[:, 0]) | (rows[:, 3] < rows[:, 1]))
    if len(bad):
        raise BoxError(f"{where}: box {int(bad[0])} corners out of order {rows[bad[0], :4].tolist()}")
    if rows.shape[1] == 5 and ((rows[:, 4] < 0) | (rows[:, 4] > 1)).any():
        raise BoxError(f"{where}: score outside [0, 1]")
    return rows


def read_boxes_jsonl(path: Path, widths: tuple[int, ...] = (4, 5)) -> dict[int, np.ndarray]:
    """image_id -> (m, w) array with w in `widths`; a fifth column carries the score."""
    out: dict[int, np.ndarray] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        where = f"{path}:{n + 1}"
        try:
            rec = json.loads(line)
            rows = np.asarray(rec["boxes"], dtype=np.float64)
            image_id = int(rec["image_id"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ArchiveError(f"{where}: malformed box record ({e})")
        out[image_id] = _check_rows(rows, widths, where)
    return out


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    atomic_write(d / "images.bin", ds.images.astype(BLOB_DTYPE).tobytes())
    sidecar = {"kind": ds.kind, "shape": list(ds.images.shape), "dtype": "<f4"}
    if ds.labels is not None:
        sidecar["labels"] = ds.labels.tolist()
    atomic_write(d / "images.json", json.dumps(sidecar).encode("utf-8"))
    if ds.kind == "detect":
        write_boxes_jsonl(d / "boxes.jsonl",
                          [{"image_id": i, "boxes": b.tolist()} for i, b in enumerate(ds.boxes)])
    return d


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    if not (d / "images.json").exists() or not (d / "images.bin").exists():
        raise ArchiveError(f"dataset not found in {d}")
    sidecar = json.loads((d / "images.json").read_text(encoding="utf-8"))
    shape = tuple(sidecar["shape"])
    raw = (d / "images.bin").read_bytes()
    expected = int(np.prod(shape)) * BLOB_DTYPE.itemsize
    if len(raw) != expected:
        raise ArchiveError(f"images.bin holds {len(raw)} bytes, expected {expected}")
    images = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(shape).astype(np.float32)
    labels = np.asarray(sidecar["labels"], dtype=np.int64) if "labels" in sidecar else None
    boxes: list[np.ndarray] = []
    if sidecar["kind"] == "detect":
        by_id = read_boxes_jsonl(d / "boxes.jsonl", widths=(4,))
        boxes = [by_id.get(i, np.zeros((0, 4)))[:, :4].astype(np.float32) for i in range(shape[0])]
    return Dataset(kind=sidecar["kind"], images=images, labels=labels, boxes=boxes)
