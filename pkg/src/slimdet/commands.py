"""
The commands behind the CLI. Each takes a resolved RunConfig, raises SlimdetError
subclasses on failure and writes its artifacts under `config.out_dir`.
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from src.slimdet.archive import ModelArchive, load_archive, save_archive
from src.slimdet.config import RunConfig, Task
from src.slimdet.errors import ConfigError, InsufficientDataError
from src.slimdet.fileio import atomic_write_json
from src.slimdet.graph import run_pipeline
from src.slimdet.metrics.accounting import PruneReport
from src.slimdet.metrics.anchors import group_anchors, kmeans_anchors
from src.slimdet.metrics.detection import EvalSweep, load_predictions, load_truths, map_sweep
from src.slimdet.nets.data import Dataset, load_dataset, make_dataset, save_dataset
from src.slimdet.nets.manifest import NUM_ANCHORS, load_manifest
from src.slimdet.nets.models import GraphNet, tiny_classifier, tiny_detector
from src.slimdet.nets.trainer import ClassifyTask, DetectTask, Trainer
from src.slimdet.reporting import SweepReport, SweepRow, result_values, write_report, write_sweep
from src.slimdet.sparsity import SparsityConstraint, constraint_from_ratios, full_constraint

log = logging.getLogger(__name__)

DATA_DIR = "data"
STRIDE = 32


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------- Shared setup ----------

def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Datasets from `data.path` (train/ and test/), else generated from the seed."""
    if cfg.data.path:
        root = _require(cfg.data.path, "dataset directory")
        return load_dataset(root / "train"), load_dataset(root / "test")
    size = cfg.data.resolved_image_size
    train = make_dataset(cfg.data.kind, cfg.data.train_size, size, cfg.seed)
    test = make_dataset(cfg.data.kind, cfg.data.test_size, size, cfg.seed + 1)
    return train, test


def build_task(cfg: RunConfig, train: Dataset, test: Dataset, anchors: Optional[np.ndarray] = None):
    if train.kind == "classify":
        return ClassifyTask(train, test)
    if anchors is None:
        anchors = kmeans_anchors(train.all_box_sizes(), k=NUM_ANCHORS, seed=cfg.seed)
    return DetectTask(train, test, anchors, stride=STRIDE, eval_config=cfg.eval)


def resolve_constraints(net: GraphNet, cfg: RunConfig) -> dict[str, SparsityConstraint]:
    """Explicit per-layer constraints win; otherwise targets are turned into counts per layer."""
    if cfg.prune.constraints:
        return dict(cfg.prune.constraints)
    t = cfg.targets
    selected = set(t.layers) if t.layers is not None else {l.name for l in net.prunable_layers()}
    out = {}
    for layer in net.prunable_layers():
        rows, cols = layer.spec.gemm_shape
        if layer.name in selected:
            out[layer.name] = constraint_from_ratios(rows, cols, t.mode, t.filter_ratio, t.column_ratio, t.weight_ratio)
        else:
            out[layer.name] = full_constraint(rows, cols, t.mode)
    return out


def _anchors_of(archive: ModelArchive) -> Optional[np.ndarray]:
    a = archive.meta.get("anchors")
    return None if a is None else np.asarray(a, dtype=np.float64)


# ---------- Commands ----------

def cmd_train(cfg: RunConfig, quiet: bool = True) -> tuple[Path, float]:
    """Train a desk model from scratch; returns the archive path and its test metric."""
    out = _out(cfg)
    train, test = load_data(cfg)
    if not cfg.data.path:
        save_dataset(train, out / DATA_DIR / "train")
        save_dataset(test, out / DATA_DIR / "test")
    size = train.images.shape[-1]
    if train.kind == "classify":
        net = tiny_classifier(seed=cfg.seed, num_classes=train.num_classes, image_size=size)
    else:
        net = tiny_detector(seed=cfg.seed, image_size=size)
    task = build_task(cfg, train, test)
    Trainer(net, task, cfg.train, seed=cfg.seed, quiet=quiet).fit(cfg.train.epochs)
    metric = task.evaluate(net)
    log.info("trained %s model: %s = %.4f", train.kind, task.metric_name, metric)

    meta = {"seed": cfg.seed, "kind": train.kind, "task": "train", "metric": {task.metric_name: metric}}
    if isinstance(task, DetectTask):
        meta["anchors"] = task.anchors.tolist()
    path = save_archive(ModelArchive.from_net(net, **meta), out / cfg.output_model)
    return path, metric


def cmd_prune(cfg: RunConfig, quiet: bool = True, workers: int = 1) -> tuple[Path, PruneReport]:
    archive = load_archive(_require(cfg.model, "input model archive"))
    out = _out(cfg)
    net = archive.to_net()
    train, test = load_data(cfg)
    if train.kind != archive.meta.get("kind", train.kind):
        raise ConfigError(f"archive holds a {archive.meta.get('kind')} model but the dataset is {train.kind}")
    task = build_task(cfg, train, test, _anchors_of(archive))
    schedule = cfg.prune.model_copy(update={"constraints": resolve_constraints(net, cfg)})

    log_path = out / "admm_log.jsonl"
    if log_path.exists():
        log_path.unlink()

    final_masks: dict[str, np.ndarray] = {}

    def checkpoint(stage: str, phase: str, engine) -> None:
        final_masks.update(engine.masks)
        meta = {**archive.meta, "seed": cfg.seed, "task": "checkpoint", "stage": stage, "phase": phase}
        ckpt = ModelArchive.from_net(net, engine.masks or None, **meta)
        save_archive(ckpt, out / "checkpoints" / f"{stage}_{phase}")
        log.info("checkpoint written after %s/%s", stage, phase)

    sweep_before = task.sweep(net) if isinstance(task, DetectTask) else None
    net, report = run_pipeline(net, schedule, task, cfg.train, seed=cfg.seed, workers=workers,
                               log_path=log_path, on_phase=checkpoint, quiet=quiet)
    if sweep_before is not None:
        report.eval_before, report.eval_after = sweep_before, task.sweep(net)
    report.config = cfg.model_dump(mode="json")

    pruned = ModelArchive.from_net(net, final_masks, **{**archive.meta, "seed": cfg.seed, "task": "prune"})
    path = save_archive(pruned, out / cfg.output_model)
    write_report(report, out, cfg.targets.mode.value)
    return path, report


def cmd_eval(cfg: RunConfig, predictions: Optional[str] = None, truths: Optional[str] = None) -> EvalSweep:
    """Sweep mAP either over interchange files or over an archived detector on its dataset."""
    out = _out(cfg)
    if predictions or truths:
        preds = load_predictions(_require(predictions, "predictions file"))
        gt = load_truths(_require(truths, "ground-truth file"))
        sweep = map_sweep(preds, gt, cfg.eval.thresholds, cfg.eval.interpolation)
    else:
        archive = load_archive(_require(cfg.model, "model archive"))
        if archive.meta.get("kind") != "detect":
            raise ConfigError("eval needs a detection model archive or prediction files")
        cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"kind": "detect"})})
        train, test = load_data(cfg)
        task = build_task(cfg, train, test, _anchors_of(archive))
        sweep = task.sweep(archive.to_net())
    atomic_write_json(out / "eval.json", {"seed": cfg.seed, "sweep": sweep.model_dump(mode="json"),
                                          "config": cfg.model_dump(mode="json")})
    return sweep


def cmd_report(cfg: RunConfig, manifest: Optional[str] = None) -> PruneReport:
    """Accounting report for an archive (under its masks) or a bare manifest."""
    out = _out(cfg)
    if manifest:
        report = PruneReport.build(load_manifest(manifest), seed=cfg.seed)
    else:
        archive = load_archive(_require(cfg.model, "model archive"))
        report = PruneReport.build(archive.manifest, archive.masks, seed=cfg.seed)
    report.config = cfg.model_dump(mode="json")
    write_report(report, out, cfg.targets.mode.value)
    return report


def cmd_anchors(cfg: RunConfig) -> list[np.ndarray]:
    """k-means anchors from a detection dataset, sorted by area and grouped into 3 scales."""
    out = _out(cfg)
    if cfg.data.path:
        train = load_dataset(_require(cfg.data.path, "dataset directory") / "train")
    else:
        cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"kind": "detect"})})
        train, _ = load_data(cfg)
    sizes = train.all_box_sizes()
    if len(sizes) < cfg.anchors_k:
        raise InsufficientDataError(f"dataset holds {len(sizes)} boxes, fewer than k={cfg.anchors_k}")
    centers = kmeans_anchors(sizes, k=cfg.anchors_k, seed=cfg.seed)
    groups = group_anchors(centers) if cfg.anchors_k % 3 == 0 else [centers]
    atomic_write_json(out / "anchors.json", {"seed": cfg.seed, "k": cfg.anchors_k,
                                             "anchors": [g.round(2).tolist() for g in groups]})
    return groups


def cmd_sweep(cfg: RunConfig, quiet: bool = True, workers: int = 1) -> SweepReport:
    """Prune one archive once per (mode, ratio) in `cfg.sweep`, each run in out/sweep/<mode>_<ratio>x/."""
    if cfg.prune.constraints:
        raise ConfigError("a sweep derives its constraints from sweep.ratios; remove prune.constraints")
    _require(cfg.model, "input model archive")
    out = _out(cfg)
    columns: list[str] = []
    rows: list[SweepRow] = []
    for mode in cfg.sweep.modes:
        for ratio in cfg.sweep.ratios:
            run = cfg.model_copy(update={
                "task": Task.prune,
                "out_dir": str(out / "sweep" / f"{mode.value}_{ratio:g}x"),
                "targets": cfg.sweep.targets(cfg.targets, mode, ratio),
            })
            _, report = cmd_prune(run, quiet=quiet, workers=workers)
            if not rows:
                columns, before = result_values(report, before=True)
                rows.append(SweepRow(model="Original model", values=before))
            rows.append(SweepRow(model=f"{mode.value.capitalize()} pruned", mode=mode.value, target=ratio,
                                 ratio=report.ratio, pruned_ratio=report.pruned_ratio,
                                 values=result_values(report)[1]))
            log.info("sweep %s at %gx: network ratio %s", mode.value, ratio, report.ratio)
    result = SweepReport(columns=columns, rows=rows)
    write_sweep(result, out)
    return result
