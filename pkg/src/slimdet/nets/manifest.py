"""
Architecture manifests.

A manifest is a JSON array of layer descriptors. Every descriptor names the layers it
reads from (`inputs`, absolute indices; -1 is the network input; default: the previous
layer), so YOLO-style shortcut and route wiring can be expressed and checked.
"""

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, ValidationError

from src.slimdet.errors import ManifestError
from src.slimdet.tensor_core import conv_output_hw

NUM_ANCHORS = 3
NUM_CLASSES = 1
HEAD_CHANNELS = NUM_ANCHORS * (4 + 1 + NUM_CLASSES)

BUNDLED = Path(__file__).resolve().parents[3] / "data" / "manifests"

LayerKind = Literal["conv", "upsample", "shortcut", "route", "avgpool", "detect"]


class LayerSpec(BaseModel):
    name: Optional[str] = None
    kind: LayerKind
    F: int = Field(ge=1)
    C: int = Field(ge=1)
    KH: int = Field(default=1, ge=1)
    KW: int = Field(default=1, ge=1)
    stride: int = Field(default=1, ge=1)
    H_out: int = Field(ge=1)
    W_out: int = Field(ge=1)
    prunable: bool = False
    inputs: Optional[list[int]] = None
    activation: Literal["leaky", "linear"] = "leaky"

    @property
    def gemm_shape(self) -> tuple[int, int]:
        return self.F, self.C * self.KH * self.KW

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return self.F, self.C, self.KH, self.KW


class LayerManifest(BaseModel):
    layers: list[LayerSpec]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        first = self.layers[0]
        return first.C, first.H_out * first.stride, first.W_out * first.stride

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def prunable_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv" and l.prunable]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise ManifestError(f"no layer named {name!r}")

    def to_json(self) -> str:
        rows = [l.model_dump(mode="json") for l in self.layers]
        return json.dumps(rows, indent=1)


# ---------- Validation ----------

def validate_manifest(manifest: LayerManifest) -> LayerManifest:
    """Fill default names/inputs and check channel chaining and spatial arithmetic."""
    if not manifest.layers:
        raise ManifestError("manifest has no layers")
    c_in, h_in, w_in = manifest.input_shape
    shapes: list[tuple[int, int, int]] = []
    names: set[str] = set()

    def src_shape(i: int, src: int) -> tuple[int, int, int]:
        if src < -1 or src >= i:
            raise ManifestError(f"input index {src} must refer to an earlier layer", layer=i)
        return (c_in, h_in, w_in) if src == -1 else shapes[src]

    for i, l in enumerate(manifest.layers):
        l.name = l.name or f"{l.kind}{i}"
        if l.name in names:
            raise ManifestError(f"duplicate layer name {l.name!r}", layer=i)
        names.add(l.name)
        if l.inputs is None:
            l.inputs = [i - 1]
        ins = [src_shape(i, s) for s in l.inputs]
        if l.kind != "conv" and l.prunable:
            raise ManifestError(f"{l.kind} layers have no weights to prune", layer=i)

        if l.kind == "route":
            if len({(h, w) for _, h, w in ins}) != 1:
                raise ManifestError("route inputs differ in spatial size", layer=i)
            expected = (sum(c for c, _, _ in ins), ins[0][1], ins[0][2])
            if l.C != expected[0]:
                raise ManifestError(f"route C={l.C} but inputs carry {expected[0]} channels", layer=i)
        else:
            arity = 2 if l.kind == "shortcut" else 1
            if len(ins) != arity:
                raise ManifestError(f"{l.kind} takes {arity} input(s), got {len(ins)}", layer=i)
            c, h, w = ins[0]
            if l.C != c:
                raise ManifestError(f"C={l.C} does not match predecessor's F={c}", layer=i)
            if l.kind == "conv":
                expected = (l.F, *conv_output_hw(h, w, l.KH, l.KW, l.stride, l.KH // 2))
            elif l.kind == "upsample":
                expected = (c, 2 * h, 2 * w)
            elif l.kind == "shortcut":
                if ins[1] != ins[0]:
                    raise ManifestError(f"shortcut inputs differ: {ins[0]} vs {ins[1]}", layer=i)
                expected = ins[0]
            elif l.kind == "avgpool":
                expected = (c, 1, 1)
            else:
                if c != HEAD_CHANNELS:
                    raise ManifestError(f"detect expects {HEAD_CHANNELS} channels, got {c}", layer=i)
                expected = ins[0]
        if l.kind != "conv" and l.F != expected[0]:
            raise ManifestError(f"{l.kind} F={l.F} should be {expected[0]}", layer=i)
        if (l.H_out, l.W_out) != expected[1:]:
            raise ManifestError(
                f"output {l.H_out}x{l.W_out} inconsistent with stride arithmetic ({expected[1]}x{expected[2]})",
                layer=i,
            )
        shapes.append((l.F, l.H_out, l.W_out))
    return manifest


# ---------- IO ----------

def manifest_from_json(text: str) -> LayerManifest:
    try:
        rows = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}")
    if not isinstance(rows, list):
        raise ManifestError("manifest must be a JSON array of layer descriptors")
    try:
        manifest = LayerManifest(layers=rows)
    except ValidationError as e:
        raise ManifestError(f"malformed layer descriptor: {e}")
    return validate_manifest(manifest)


def load_manifest(path: str | Path) -> LayerManifest:
    p = Path(path)
    if not p.exists():
        bundled = BUNDLED / f"{p.stem}.json"
        if not bundled.exists():
            raise ManifestError(f"manifest not found: {path}")
        p = bundled
    return manifest_from_json(p.read_text(encoding="utf-8"))


def save_manifest(manifest: LayerManifest, path: str | Path) -> None:
    Path(path).write_text(manifest.to_json(), encoding="utf-8")
