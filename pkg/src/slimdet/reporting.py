"""
Human-readable and JSON renderings of prune reports and evaluation sweeps.

The results table follows the usual layout for this kind of study: one row per model
(original, then pruned variants with their compression ratio), one column per IoU
threshold. Published reference numbers are shown in a separate, clearly labeled table;
they are citations and never mixed with measured values.
"""

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import pandas as pd
from pydantic import BaseModel
from rich.console import Console
from rich.table import Table

from src.slimdet.config import DEFAULT_THRESHOLDS
from src.slimdet.fileio import atomic_write_text
from src.slimdet.metrics.accounting import PruneReport, compression_ratio, count_flops, count_params, storage_bytes
from src.slimdet.metrics.detection import EvalSweep
from src.slimdet.nets.manifest import load_manifest

# YOLOv3-320, one class: mAP (%) per IoU threshold 0.40 ... 0.75
CITED_RESULTS: list[tuple[str, str, tuple[float, ...]]] = [
    ("Original model", "1.00x", (81.2, 76.3, 71.2, 63.4, 54.7, 42.3, 30.7, 19.1)),
    ("Filter pruned", "11.55x", (81.4, 75.9, 71.5, 63.8, 53.0, 40.9, 29.7, 17.9)),
    ("Filter pruned", "16.26x", (80.6, 76.2, 71.2, 62.5, 53.6, 42.3, 30.0, 18.7)),
    ("Filter pruned", "19.33x", (80.7, 76.1, 71.1, 62.3, 52.9, 41.2, 30.0, 18.6)),
    ("Column pruned", "11.60x", (81.2, 76.9, 71.9, 64.5, 53.3, 41.8, 29.8, 18.4)),
    ("Column pruned", "16.36x", (80.7, 76.0, 71.3, 64.1, 55.9, 41.5, 28.4, 19.1)),
    ("Column pruned", "19.55x", (80.6, 76.1, 71.0, 63.7, 53.5, 42.3, 29.7, 18.7)),
    ("Combined pruned", "36.02x", (81.2, 76.3, 71.0, 63.5, 53.4, 42.8, 31.2, 19.3)),
    ("Combined pruned", "51.97x", (81.0, 76.0, 70.6, 62.8, 53.0, 41.7, 29.0, 18.3)),
]

CITED_FIGURES = {
    "params_before": 61.5e6,
    "params_after": 1.7e6,
    "storage_before_mb": 246.4,
    "storage_after_mb": 6.84,
    "flops_before": 38.63e9,
    "flops_after": 1.32e9,
    "ratio": 36.02,
}
SELF_TEST_TOLERANCE = 0.01
MB = 1e6


@dataclass(frozen=True)
class Check:
    name: str
    computed: float
    cited: float

    @property
    def rel_error(self) -> float:
        return abs(self.computed - self.cited) / abs(self.cited)

    @property
    def ok(self) -> bool:
        return self.rel_error <= SELF_TEST_TOLERANCE


def self_test(manifest_path: str = "yolov3_320") -> list[Check]:
    """Arithmetic cross-checks of the accounting against the cited figures."""
    c = CITED_FIGURES
    fixture = load_manifest(manifest_path)
    return [
        Check("storage of 61.5 M params (MB)", storage_bytes(int(c["params_before"])) / MB, c["storage_before_mb"]),
        Check("storage of 1.7 M params (MB)", storage_bytes(int(c["params_after"])) / MB, c["storage_after_mb"]),
        Check("compression 61.5 M / 1.7 M (x)", compression_ratio(int(c["params_before"]), int(c["params_after"])), c["ratio"]),
        Check("fixture params", count_params(fixture), c["params_before"]),
        Check("fixture FLOPs", count_flops(fixture), c["flops_before"]),
    ]


# ---------- Tables ----------

def fmt_ratio(r: Optional[float]) -> str:
    return "all pruned" if r is None else f"{r:.2f}x"


def _fmt_count(n: float) -> str:
    for unit, scale in (("Bn", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.2f} {unit}"
    return f"{n:.0f}"


def summary_table(report: PruneReport) -> Table:
    t = Table(title="Model size")
    t.add_column("")
    t.add_column("before", justify="right")
    t.add_column("after", justify="right")
    t.add_column("ratio", justify="right")
    t.add_row("params", _fmt_count(report.params_before), _fmt_count(report.params_after), fmt_ratio(report.ratio))
    t.add_row("params (pruned layers)", _fmt_count(report.pruned_params_before),
              _fmt_count(report.pruned_params_after), fmt_ratio(report.pruned_ratio))
    t.add_row("FLOPs", _fmt_count(report.flops_before), _fmt_count(report.flops_after),
              fmt_ratio(compression_ratio(report.flops_before, report.flops_after)))
    t.add_row("storage (MB)", f"{report.storage_before / MB:.2f}", f"{report.storage_after / MB:.2f}",
              fmt_ratio(compression_ratio(report.storage_before, report.storage_after)))
    return t


def layer_detail_table(report: PruneReport) -> Table:
    t = Table(title="Per-layer detail")
    for col in ("layer", "shape", "filters", "columns", "params", "ratio", "feasible"):
        t.add_column(col, justify="left" if col in ("layer", "shape") else "right")
    for row in report.layers:
        if not row["pruned"]:
            continue
        feasible = report.feasible.get(row["layer"])
        t.add_row(
            row["layer"],
            row["shape"],
            f"{row['filters']}/{row['filters_total']}",
            f"{row['columns']}/{row['columns_total']}",
            f"{row['params_after']}/{row['params_before']}",
            fmt_ratio(row["ratio"]),
            "-" if feasible is None else ("yes" if feasible else "NO"),
        )
    return t


def results_table(report: PruneReport, mode: str) -> Table:
    """Rows = original and pruned model, columns = IoU thresholds (or the single task metric)."""
    t = Table(title="Results (measured)")
    t.add_column("model")
    t.add_column("ratio", justify="right")
    label = f"{mode.capitalize()} pruned"
    if report.eval_before is not None and report.eval_after is not None:
        for th in report.eval_before.thresholds:
            t.add_column(f"{th:.2f}", justify="right")
        t.add_row("Original model", "1.00x", *[f"{100 * v:.1f}" for v in report.eval_before.values])
        t.add_row(label, fmt_ratio(report.ratio), *[f"{100 * v:.1f}" for v in report.eval_after.values])
    else:
        t.add_column(report.metric_name or "metric", justify="right")
        t.add_row("Original model", "1.00x", _pct(report.metric_before))
        t.add_row(label, fmt_ratio(report.ratio), _pct(report.metric_after))
    return t


def _pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def cited_table() -> Table:
    t = Table(title="Published reference, YOLOv3-320 (cited, not measured here)")
    t.add_column("model")
    t.add_column("ratio", justify="right")
    for th in DEFAULT_THRESHOLDS:
        t.add_column(f"{th:.2f}", justify="right")
    for name, ratio, values in CITED_RESULTS:
        t.add_row(name, ratio, *[f"{v:.1f}" for v in values])
    return t


def sweep_table(sweep: EvalSweep, title: str = "mAP by IoU threshold") -> Table:
    t = Table(title=f"{title} ({sweep.interpolation})")
    for th in sweep.thresholds:
        t.add_column(f"{th:.2f}", justify="right")
    t.add_row(*[f"{100 * v:.1f}" for v in sweep.values])
    return t


def self_test_table(checks: list[Check]) -> Table:
    t = Table(title="Accounting self-test")
    for col in ("check", "computed", "cited", "rel. error", ""):
        t.add_column(col, justify="left" if col == "check" else "right")
    for c in checks:
        t.add_row(c.name, f"{c.computed:,.2f}", f"{c.cited:,.2f}", f"{100 * c.rel_error:.2f}%",
                  "ok" if c.ok else "FAIL")
    return t


# ---------- Rendering ----------

def render(*tables: Table, width: int = 120) -> str:
    console = Console(record=True, width=width, file=io.StringIO(), color_system=None)
    for t in tables:
        console.print(t)
    return console.export_text()


def report_tables(report: PruneReport, mode: str, cite: bool = True) -> list[Table]:
    tables = [summary_table(report), layer_detail_table(report), results_table(report, mode)]
    if cite:
        tables.append(cited_table())
    return tables


def write_report(report: PruneReport, out_dir: str | Path, mode: str) -> tuple[Path, Path]:
    """report.json, report.txt and the per-layer rows as layers.csv."""
    out = Path(out_dir)
    json_path = atomic_write_text(out / "report.json", report.model_dump_json(indent=2) + "\n")
    txt_path = atomic_write_text(out / "report.txt", render(*report_tables(report, mode)))
    atomic_write_text(out / "layers.csv", report.layer_frame().to_csv(index=False))
    return json_path, txt_path


# ---------- Sweeps ----------

class SweepRow(BaseModel):
    model: str
    mode: Optional[str] = None
    target: Optional[float] = None
    ratio: Optional[float] = 1.0
    pruned_ratio: Optional[float] = 1.0
    values: list[Optional[float]]


class SweepReport(BaseModel):
    """Original model first, then one row per (mode, ratio); `columns` are IoU thresholds or the metric."""
    columns: list[str]
    rows: list[SweepRow]

    def frame(self) -> pd.DataFrame:
        records = [{**row.model_dump(exclude={"values"}), **dict(zip(self.columns, row.values))} for row in self.rows]
        return pd.DataFrame(records, columns=["model", "mode", "target", "ratio", "pruned_ratio", *self.columns])


def result_values(report: PruneReport, before: bool = False) -> tuple[list[str], list[Optional[float]]]:
    """Column labels and values of one side of a prune report: the mAP sweep, else the task metric."""
    sweep = report.eval_before if before else report.eval_after
    if sweep is not None:
        return [f"{t:.2f}" for t in sweep.thresholds], list(sweep.values)
    return [report.metric_name or "metric"], [report.metric_before if before else report.metric_after]


def sweep_results_table(result: SweepReport) -> Table:
    t = Table(title="Results by mode and ratio (measured)")
    t.add_column("model")
    t.add_column("target", justify="right")
    t.add_column("ratio", justify="right")
    t.add_column("pruned layers", justify="right")
    for col in result.columns:
        t.add_column(col, justify="right")
    for row in result.rows:
        t.add_row(row.model, "-" if row.target is None else f"{row.target:g}x", fmt_ratio(row.ratio),
                  fmt_ratio(row.pruned_ratio), *[_pct(v) for v in row.values])
    return t


def write_sweep(result: SweepReport, out_dir: str | Path) -> Path:
    """sweep.json, sweep.csv and sweep.txt (measured table above the cited one)."""
    out = Path(out_dir)
    atomic_write_text(out / "sweep.json", result.model_dump_json(indent=2) + "\n")
    atomic_write_text(out / "sweep.csv", result.frame().to_csv(index=False))
    return atomic_write_text(out / "sweep.txt", render(sweep_results_table(result), cited_table()))
