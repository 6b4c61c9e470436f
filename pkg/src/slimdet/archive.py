"""
Model archives: a directory holding

- manifest.json   layer descriptors (JSON array)
- weights.bin     conv weights, little-endian float32, manifest order, (F, C, KH, KW) row-major
- biases.bin      conv biases, little-endian float32, manifest order
- masks.bin       optional: GEMM-view retention bitmaps of `meta.masked_layers`, bit-packed
- meta.json       format version, seed, creation parameters

weights.bin is always exactly 4 * count_params(manifest) bytes (dense, zeros included).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from src.slimdet.errors import ArchiveError, ManifestError
from src.slimdet.fileio import atomic_write, atomic_write_json, atomic_write_text
from src.slimdet.metrics.accounting import count_params
from src.slimdet.nets.manifest import LayerManifest, manifest_from_json
from src.slimdet.nets.models import GraphNet
from src.slimdet.sparsity import SparsityMode, check_mask_structure

FORMAT_VERSION = 1
BLOB = np.dtype("<f4")


@dataclass
class ModelArchive:
    manifest: LayerManifest
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    masks: Optional[dict[str, np.ndarray]] = None
    meta: dict = field(default_factory=dict)

    @property
    def compaction_eligible(self) -> bool:
        """True iff every mask is a row-set x column-set rectangle (filter, column or combined)."""
        if not self.masks:
            return False
        return all(check_mask_structure(m, SparsityMode.combined) for m in self.masks.values())

    @classmethod
    def from_net(cls, net: GraphNet, masks: Optional[dict[str, np.ndarray]] = None, **meta) -> "ModelArchive":
        convs = net.conv_layers()
        return cls(
            manifest=net.manifest,
            weights={l.name: l.weight.data.astype(np.float32) for l in convs},
            biases={l.name: l.bias.data.astype(np.float32) for l in convs},
            masks={k: v.astype(bool) for k, v in masks.items()} if masks else None,
            meta=dict(meta),
        )

    def to_net(self) -> GraphNet:
        net = GraphNet(self.manifest, seed=int(self.meta.get("seed", 0)))
        for layer in net.conv_layers():
            layer.weight.data[...] = self.weights[layer.name]
            layer.bias.data[...] = self.biases[layer.name]
        return net


def _read(path: Path) -> bytes:
    if not path.exists():
        raise ArchiveError(f"archive member missing: {path}")
    return path.read_bytes()


def _check_length(what: str, raw: bytes, expected: int) -> None:
    if len(raw) != expected:
        raise ArchiveError(f"{what} holds {len(raw)} bytes, expected {expected}")


def save_archive(archive: ModelArchive, path: str | Path) -> Path:
    d = Path(path)
    convs = archive.manifest.conv_layers()
    weights = b"".join(archive.weights[l.name].astype(BLOB).tobytes() for l in convs)
    if len(weights) != BLOB.itemsize * count_params(archive.manifest):
        raise ArchiveError("weights do not match the manifest's parameter count")
    biases = b"".join(archive.biases[l.name].astype(BLOB).tobytes() for l in convs)

    meta = {k: v for k, v in archive.meta.items() if k not in ("masked_layers", "compaction_eligible")}
    meta["version"] = FORMAT_VERSION
    masked = [l.name for l in convs if archive.masks and l.name in archive.masks]
    meta["masked_layers"] = masked
    meta["compaction_eligible"] = archive.compaction_eligible
    atomic_write_text(d / "manifest.json", archive.manifest.to_json())
    atomic_write(d / "weights.bin", weights)
    atomic_write(d / "biases.bin", biases)
    if masked:
        bits = np.concatenate([archive.masks[n].astype(bool).ravel() for n in masked])
        atomic_write(d / "masks.bin", np.packbits(bits, bitorder="little").tobytes())
    elif (d / "masks.bin").exists():
        (d / "masks.bin").unlink()
    atomic_write_json(d / "meta.json", meta)
    return d


def load_archive(path: str | Path) -> ModelArchive:
    d = Path(path)
    if not d.is_dir():
        raise ArchiveError(f"archive not found: {d}")
    try:
        meta = json.loads(_read(d / "meta.json"))
    except json.JSONDecodeError as e:
        raise ArchiveError(f"meta.json is not valid JSON: {e}")
    if meta.get("version") != FORMAT_VERSION:
        raise ArchiveError(f"archive format version {meta.get('version')} is not supported (expected {FORMAT_VERSION})")
    try:
        manifest = manifest_from_json(_read(d / "manifest.json").decode("utf-8"))
    except ManifestError as e:
        raise ArchiveError(f"archive manifest is invalid: {e}")
    convs = manifest.conv_layers()

    raw = _read(d / "weights.bin")
    _check_length("weights.bin", raw, BLOB.itemsize * count_params(manifest))
    flat = np.frombuffer(raw, dtype=BLOB)
    raw_b = _read(d / "biases.bin")
    _check_length("biases.bin", raw_b, BLOB.itemsize * sum(l.F for l in convs))
    flat_b = np.frombuffer(raw_b, dtype=BLOB)

    weights, biases = {}, {}
    w_off = b_off = 0
    for l in convs:
        size = l.F * l.C * l.KH * l.KW
        weights[l.name] = flat[w_off:w_off + size].reshape(l.weight_shape).astype(np.float32)
        biases[l.name] = flat_b[b_off:b_off + l.F].astype(np.float32)
        w_off += size
        b_off += l.F

    masks = None
    masked = meta.get("masked_layers", [])
    if masked:
        by_name = {l.name: l for l in convs}
        unknown = [n for n in masked if n not in by_name]
        if unknown:
            raise ArchiveError(f"masks reference unknown layers: {unknown}")
        total = sum(int(np.prod(by_name[n].gemm_shape)) for n in masked)
        raw_m = _read(d / "masks.bin")
        _check_length("masks.bin", raw_m, (total + 7) // 8)
        bits = np.unpackbits(np.frombuffer(raw_m, dtype=np.uint8), count=total, bitorder="little").astype(bool)
        masks, off = {}, 0
        for n in masked:
            shape = by_name[n].gemm_shape
            size = shape[0] * shape[1]
            masks[n] = bits[off:off + size].reshape(shape)
            off += size

    meta = {k: v for k, v in meta.items() if k not in ("version", "masked_layers", "compaction_eligible")}
    return ModelArchive(manifest=manifest, weights=weights, biases=biases, masks=masks, meta=meta)
