"""
Mini-batch training loop and the two desk-scale tasks.

- `Trainer.fit` runs SGD under a warmup + cosine schedule spanning the call's batches,
  with optional mixup, gradient masks and an extra penalty term (the ADMM regularizer)
- `ClassifyTask` / `DetectTask` own the data, turn index batches into inputs and targets,
  and score a network (accuracy, or mAP at IoU 0.5 plus full threshold sweeps)
"""

import logging
from typing import Callable, Optional, Protocol

import numpy as np
from tqdm import tqdm

from src.slimdet.config import EvalConfig, MixupConfig, TrainConfig
from src.slimdet.errors import DivergenceError
from src.slimdet.metrics.boxes import decode_head, nms
from src.slimdet.metrics.detection import EvalSweep, map_at, map_sweep
from src.slimdet.nets.data import Dataset, batch_count, batches
from src.slimdet.nets.losses import one_hot, softmax_cross_entropy, yolo_loss
from src.slimdet.nets.models import GraphNet
from src.slimdet.nets.optim import SGD
from src.slimdet.schedules import lr_at, mixup_batch, mixup_detection

log = logging.getLogger(__name__)

EVAL_BATCH = 128


class Penalty(Protocol):
    def value(self) -> float: ...

    def grads(self) -> dict[str, np.ndarray]:
        """Parameter name -> gradient of `value()`, shaped like the parameter."""
        ...


# ---------- Tasks ----------

class ClassifyTask:
    metric_name = "accuracy"

    def __init__(self, train: Dataset, test: Dataset) -> None:
        self.train, self.test = train, test

    def batch(self, idx: np.ndarray, rng: np.random.Generator, mix: MixupConfig):
        x = self.train.images[idx]
        y = one_hot(self.train.labels[idx], self.train.num_classes)
        if mix.enabled:
            x, y, _, _ = mixup_batch(x, y, mix, rng)
        return x, y

    def loss(self, out: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
        loss, grad = softmax_cross_entropy(out.reshape(len(out), -1), target.astype(out.dtype))
        return loss, grad.reshape(out.shape)

    def evaluate(self, net: GraphNet) -> float:
        correct = 0
        for start in range(0, len(self.test), EVAL_BATCH):
            out = net.forward(self.test.images[start:start + EVAL_BATCH])
            pred = out.reshape(len(out), -1).argmax(axis=1)
            correct += int((pred == self.test.labels[start:start + EVAL_BATCH]).sum())
        return correct / len(self.test)


class DetectTask:
    metric_name = "mAP@0.50"

    def __init__(self, train: Dataset, test: Dataset, anchors: np.ndarray, stride: int = 32,
                 eval_config: Optional[EvalConfig] = None) -> None:
        self.train, self.test = train, test
        self.anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
        self.stride = stride
        self.eval_config = eval_config or EvalConfig()

    def batch(self, idx: np.ndarray, rng: np.random.Generator, mix: MixupConfig):
        x = self.train.images[idx]
        boxes = [self.train.boxes[i] for i in idx]
        weights = [np.ones(len(b), dtype=np.float32) for b in boxes]
        if mix.enabled:
            x, _, lam, perm = mixup_batch(x, np.zeros((len(x), 1), dtype=x.dtype), mix, rng)
            pairs = [mixup_detection(boxes[i], boxes[j], lam) for i, j in enumerate(perm)]
            boxes, weights = [p[0] for p in pairs], [p[1] for p in pairs]
        return x, (boxes, weights)

    def loss(self, out: np.ndarray, target) -> tuple[float, np.ndarray]:
        boxes, weights = target
        return yolo_loss(out, boxes, weights, self.anchors, self.stride)

    def predict(self, net: GraphNet, ds: Optional[Dataset] = None) -> dict[int, np.ndarray]:
        ds = ds or self.test
        cfg = self.eval_config
        preds: dict[int, np.ndarray] = {}
        for start in range(0, len(ds), EVAL_BATCH):
            out = net.forward(ds.images[start:start + EVAL_BATCH])
            for k, head in enumerate(out):
                dets = decode_head(head, self.anchors, self.stride, cfg.conf_threshold)
                preds[start + k] = nms(dets, cfg.nms_iou)
        return preds

    def truths(self, ds: Optional[Dataset] = None) -> dict[int, np.ndarray]:
        ds = ds or self.test
        return {i: b for i, b in enumerate(ds.boxes)}

    def sweep(self, net: GraphNet) -> EvalSweep:
        cfg = self.eval_config
        return map_sweep(self.predict(net), self.truths(), cfg.thresholds, cfg.interpolation)

    def evaluate(self, net: GraphNet) -> float:
        return map_at(self.predict(net), self.truths(), 0.5, self.eval_config.interpolation)


# ---------- Training loop ----------

class Trainer:
    def __init__(self, net: GraphNet, task, config: TrainConfig, seed: int = 0, quiet: bool = True) -> None:
        self.net = net
        self.task = task
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.quiet = quiet

    def fit(self, epochs: int, masks: Optional[dict[str, np.ndarray]] = None,
            penalty: Optional[Penalty] = None, desc: str = "train",
            on_step: Optional[Callable[[int, float], None]] = None) -> list[float]:
        """Train for `epochs`; returns the mean loss of every epoch.

        `masks` maps conv layer names to GEMM-shaped retention masks; masked weight
        gradients are zeroed before every update.
        """
        from src.slimdet.admm import augmented_loss

        cfg = self.config
        n = len(self.task.train)
        schedule = cfg.lr.schedule(batch_count(n, cfg.batch_size), epochs)
        params = self.net.named_parameters()
        opt = SGD(params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        param_masks = {f"{name}.weight": m for name, m in (masks or {}).items()}

        t = 0
        history: list[float] = []
        for epoch in range(epochs):
            total, seen = 0.0, 0
            bar = tqdm(batches(n, cfg.batch_size, self.rng), total=batch_count(n, cfg.batch_size),
                       desc=f"{desc} {epoch + 1}/{epochs}", disable=True if self.quiet else None, leave=False)
            for idx in bar:
                batch = self.task.batch(idx, self.rng, cfg.mixup)
                self.net.zero_grad()
                if penalty is None:
                    loss = self._task_loss(batch)
                else:
                    loss = augmented_loss(batch, penalty, self._task_loss)
                    for k, g in penalty.grads().items():
                        params[k].grad += g.astype(params[k].grad.dtype, copy=False)
                if not np.isfinite(loss):
                    raise DivergenceError(f"{desc}: non-finite loss at epoch {epoch + 1}, batch {t}")
                opt.step(lr_at(t, schedule), param_masks)
                if on_step is not None:
                    on_step(t, loss)
                t += 1
                total += loss * len(idx)
                seen += len(idx)
            history.append(total / seen)
            log.debug("%s epoch %d/%d loss %.5f", desc, epoch + 1, epochs, history[-1])
        return history

    def _task_loss(self, batch) -> float:
        """Forward and backward on one batch; the task gradients are left on the parameters."""
        x, target = batch
        loss, grad = self.task.loss(self.net.forward(x), target)
        self.net.backward(grad)
        return loss
