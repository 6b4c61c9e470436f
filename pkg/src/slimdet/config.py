"""
Run configuration.

- `Settings` holds process-level defaults read from the environment (.env supported)
- `RunConfig` is the per-run document loaded from `--config <file>` (JSON)
- Precedence: Settings defaults < config file < CLI flags
"""

import json
import os
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.slimdet.errors import ConfigError
from src.slimdet.sparsity import SparsityConstraint, SparsityMode

DEFAULT_THRESHOLDS = (0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75)


class Settings(BaseModel):
    out_dir: str = "runs"
    seed: int = 0
    log_level: str = "INFO"
    threads: int = 1

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            out_dir=os.getenv("SLIMDET_OUT_DIR", "runs"),
            seed=int(os.getenv("SLIMDET_SEED", "0")),
            log_level=os.getenv("SLIMDET_LOG_LEVEL", "INFO"),
            threads=int(os.getenv("SLIMDET_THREADS", "1")),
        )


class Task(str, Enum):
    train = "train"
    prune = "prune"
    eval = "eval"
    report = "report"
    anchors = "anchors"
    sweep = "sweep"


# ---------- Schedules ----------

class LrSchedule(BaseModel):
    """Linear warmup then cosine decay, indexed by batch."""
    lr0: float = Field(gt=0)
    warmup_batches: int = Field(ge=0)
    total_batches: int = Field(ge=1)
    lr_min: float = Field(default=0.0, ge=0)
    warmup_start: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "LrSchedule":
        if self.warmup_batches > self.total_batches:
            raise ValueError("warmup_batches must not exceed total_batches")
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        return self


class LrConfig(BaseModel):
    lr0: float = Field(default=0.05, gt=0)
    warmup_batches: Optional[int] = Field(default=None, ge=0)  # None: one epoch
    lr_min: float = Field(default=0.0, ge=0)
    warmup_start: float = Field(default=0.0, ge=0)

    def schedule(self, batches_per_epoch: int, epochs: int) -> LrSchedule:
        total = max(1, batches_per_epoch * epochs)
        warmup = batches_per_epoch if self.warmup_batches is None else self.warmup_batches
        return LrSchedule(
            lr0=self.lr0,
            warmup_batches=min(warmup, total),
            total_batches=total,
            lr_min=self.lr_min,
            warmup_start=self.warmup_start,
        )


class MixupConfig(BaseModel):
    alpha: float = Field(default=0.2, gt=0)
    enabled: bool = False


# ---------- Training / pruning ----------

class TrainConfig(BaseModel):
    epochs: int = Field(default=6, ge=1)
    batch_size: int = Field(default=32, ge=1)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    lr: LrConfig = LrConfig()
    mixup: MixupConfig = MixupConfig()


class PruneSchedule(BaseModel):
    admm_iterations: int = Field(default=9, ge=1)
    epochs_per_iteration: int = Field(default=1, ge=1)
    retrain_epochs: int = Field(default=3, ge=1)
    rho: float = Field(default=1e-3, gt=0)
    constraints: dict[str, SparsityConstraint] = Field(default_factory=dict)
    combined_strategy: Literal["sequential", "joint"] = "sequential"


class PruneTargets(BaseModel):
    """Compression targets expressed as ratios (2.0 = keep half); resolved per layer into counts."""
    mode: SparsityMode = SparsityMode.combined
    filter_ratio: float = Field(default=2.0, ge=1)
    column_ratio: float = Field(default=2.0, ge=1)
    weight_ratio: float = Field(default=4.0, ge=1)
    layers: Optional[list[str]] = None  # None: every prunable layer; the others keep all weights


class SweepConfig(BaseModel):
    """Grid of prune runs. A ratio applies to the groups its mode prunes, so combined at r
    keeps 1/r of the filters and 1/r of the columns."""
    modes: list[SparsityMode] = Field(
        default_factory=lambda: [SparsityMode.filter, SparsityMode.column, SparsityMode.combined], min_length=1)
    ratios: list[float] = Field(default_factory=lambda: [2.0, 4.0], min_length=1)

    @field_validator("ratios")
    @classmethod
    def _compressing(cls, v: list[float]) -> list[float]:
        if any(r < 1 for r in v):
            raise ValueError("sweep ratios must be >= 1")
        return v

    def targets(self, base: PruneTargets, mode: SparsityMode, ratio: float) -> PruneTargets:
        return base.model_copy(update={"mode": mode, "filter_ratio": ratio, "column_ratio": ratio,
                                       "weight_ratio": ratio})


class EvalConfig(BaseModel):
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    interpolation: Literal["all_point", "eleven_point"] = "all_point"
    conf_threshold: float = Field(default=0.05, ge=0, le=1)
    nms_iou: float = Field(default=0.45, gt=0, le=1)

    @field_validator("thresholds")
    @classmethod
    def _increasing(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v or any(t < 0 or t > 1 for t in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("thresholds must be strictly increasing within [0, 1]")
        return v


class DataConfig(BaseModel):
    kind: Literal["classify", "detect"] = "classify"
    train_size: int = Field(default=512, ge=1)
    test_size: int = Field(default=256, ge=1)
    image_size: Optional[int] = Field(default=None, ge=8)  # None: 16 for classify, 96 for detect
    path: Optional[str] = None  # dataset directory written by `train`; generated when absent

    @property
    def resolved_image_size(self) -> int:
        if self.image_size is not None:
            return self.image_size
        return 16 if self.kind == "classify" else 96


class RunConfig(BaseModel):
    task: Task = Task.prune
    model: Optional[str] = None       # input archive
    output_model: str = "model"       # archive directory name inside out_dir
    seed: int = 0
    out_dir: str = "runs"
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    prune: PruneSchedule = PruneSchedule()
    targets: PruneTargets = PruneTargets()
    eval: EvalConfig = EvalConfig()
    sweep: SweepConfig = SweepConfig()
    anchors_k: int = Field(default=9, ge=1)

    @classmethod
    def load(cls, path: Optional[str], settings: Optional[Settings] = None, **overrides) -> "RunConfig":
        """Settings defaults, then the JSON file, then non-None keyword overrides."""
        settings = settings or Settings.from_env()
        base: dict = {"seed": settings.seed, "out_dir": settings.out_dir}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                base.update(json.loads(p.read_text(encoding="utf-8")))
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file is not valid JSON: {e}")
        base.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls.model_validate(base)
        except ValidationError as e:
            raise ConfigError(str(e))

