"""
Parameter, FLOPs and storage accounting over a manifest, optionally under masks.

- params: F*C*KH*KW per conv layer, or the mask popcount when a mask is given
- FLOPs: 2 * params_layer * H_out * W_out (multiply and add counted separately)
- storage: 4 bytes per retained parameter
"""

import json
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from src.slimdet.errors import ManifestError, ShapeMismatchError
from src.slimdet.metrics.detection import EvalSweep
from src.slimdet.nets.manifest import LayerManifest, LayerSpec
from src.slimdet.sparsity import col_keep, row_keep
from src.slimdet.tensor_core import BYTES_PER_PARAM

Masks = dict[str, np.ndarray]
LAYER_COLUMNS = [
    "layer", "shape", "pruned", "filters", "filters_total", "columns", "columns_total",
    "params_before", "params_after", "flops_before", "flops_after", "ratio",
]


def _checked_masks(manifest: LayerManifest, masks: Optional[Masks]) -> Masks:
    masks = masks or {}
    convs = {l.name: l for l in manifest.conv_layers()}
    for name, mask in masks.items():
        if name not in convs:
            raise ManifestError(f"mask given for unknown conv layer {name!r}")
        if mask.shape != convs[name].gemm_shape:
            raise ShapeMismatchError(f"{name}: mask {mask.shape} does not match GEMM view {convs[name].gemm_shape}")
    return masks


def layer_params(layer: LayerSpec, mask: Optional[np.ndarray] = None) -> int:
    if mask is None:
        return layer.F * layer.C * layer.KH * layer.KW
    return int(np.count_nonzero(mask))


def layer_flops(layer: LayerSpec, mask: Optional[np.ndarray] = None) -> int:
    return 2 * layer_params(layer, mask) * layer.H_out * layer.W_out


def count_params(manifest: LayerManifest, masks: Optional[Masks] = None) -> int:
    masks = _checked_masks(manifest, masks)
    return sum(layer_params(l, masks.get(l.name)) for l in manifest.conv_layers())


def count_flops(manifest: LayerManifest, masks: Optional[Masks] = None) -> int:
    masks = _checked_masks(manifest, masks)
    return sum(layer_flops(l, masks.get(l.name)) for l in manifest.conv_layers())


def storage_bytes(params: int) -> int:
    return int(params) * BYTES_PER_PARAM


def compression_ratio(before: int, after: int) -> Optional[float]:
    """before / after; None once nothing remains, so reports stay valid JSON."""
    return float(before) / after if after > 0 else None


def layer_table(manifest: LayerManifest, masks: Optional[Masks] = None) -> pd.DataFrame:
    """One row per conv layer: dense vs retained parameters, FLOPs and group counts."""
    masks = _checked_masks(manifest, masks)
    rows = []
    for l in manifest.conv_layers():
        mask = masks.get(l.name)
        rows_total, cols_total = l.gemm_shape
        before, after = layer_params(l), layer_params(l, mask)
        rows.append({
            "layer": l.name,
            "shape": f"{l.F}x{l.C}x{l.KH}x{l.KW}",
            "pruned": mask is not None and not bool(np.all(mask)),
            "filters": len(row_keep(mask)) if mask is not None else rows_total,
            "filters_total": rows_total,
            "columns": len(col_keep(mask)) if mask is not None else cols_total,
            "columns_total": cols_total,
            "params_before": before,
            "params_after": after,
            "flops_before": layer_flops(l),
            "flops_after": layer_flops(l, mask),
            "ratio": compression_ratio(before, after),
        })
    return pd.DataFrame(rows, columns=LAYER_COLUMNS)


class PruneReport(BaseModel):
    params_before: int
    params_after: int
    ratio: Optional[float]
    pruned_params_before: int
    pruned_params_after: int
    pruned_ratio: Optional[float]
    flops_before: int
    flops_after: int
    storage_before: int
    storage_after: int
    layers: list[dict] = Field(default_factory=list)
    feasible: dict[str, bool] = Field(default_factory=dict)
    loss_trajectory: list[dict] = Field(default_factory=list)
    metric_name: Optional[str] = None
    metric_before: Optional[float] = None
    metric_after: Optional[float] = None
    eval_before: Optional[EvalSweep] = None
    eval_after: Optional[EvalSweep] = None
    seed: Optional[int] = None
    config: dict = Field(default_factory=dict)

    @classmethod
    def build(cls, manifest: LayerManifest, masks: Optional[Masks] = None, **extra) -> "PruneReport":
        table = layer_table(manifest, masks)
        pruned = table[table["pruned"].astype(bool)]
        params_before, params_after = int(table["params_before"].sum()), int(table["params_after"].sum())
        pb, pa = int(pruned["params_before"].sum()), int(pruned["params_after"].sum())
        return cls(
            params_before=params_before,
            params_after=params_after,
            ratio=compression_ratio(params_before, params_after),
            pruned_params_before=pb,
            pruned_params_after=pa,
            pruned_ratio=compression_ratio(pb, pa) if len(pruned) else 1.0,
            flops_before=int(table["flops_before"].sum()),
            flops_after=int(table["flops_after"].sum()),
            storage_before=storage_bytes(params_before),
            storage_after=storage_bytes(params_after),
            layers=json.loads(table.to_json(orient="records", double_precision=15)),
            **extra,
        )

    def layer_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.layers)
