"""
ADMM-regularized pruning: pre-pruning, masked mapping and masked retraining.

- Pre-pruning minimizes task loss + sum_i (rho/2)||W_i - Z_i + U_i||_F^2 for a few epochs,
  then Z_i <- proj_S_i(W_i + U_i) and U_i <- U_i + W_i - Z_i
- Masked mapping hard-projects W_i onto S_i and records the retention masks
- Retraining zeroes masked gradients, so pruned weights stay exactly zero
- Combined pruning runs sequentially by default: a filter stage, then a column stage on
  the filter-pruned model with the filter mask frozen
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from src.slimdet.config import PruneSchedule
from src.slimdet.errors import ConfigError, DivergenceError, ShapeMismatchError
from src.slimdet.nets.models import GraphNet
from src.slimdet.nets.trainer import Trainer
from src.slimdet.sparsity import (
    SparsityConstraint,
    SparsityMask,
    SparsityMode,
    apply_mask,
    is_feasible,
    project,
)
from src.slimdet.tensor_core import to_gemm

log = logging.getLogger(__name__)

Constraints = dict[str, SparsityConstraint]
Masks = dict[str, SparsityMask]


@dataclass
class AdmmState:
    """W holds live GEMM views of the network weights; Z and U are owned copies."""
    W: dict[str, np.ndarray]
    Z: dict[str, np.ndarray]
    U: dict[str, np.ndarray]
    rho: float
    k: int = 0
    weight_shapes: dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.rho < 0:
            raise ConfigError(f"rho must be non-negative, got {self.rho}")
        for name, w in self.W.items():
            if self.Z[name].shape != w.shape or self.U[name].shape != w.shape:
                raise ShapeMismatchError(f"{name}: W, Z and U must share one shape")

    def residuals(self) -> dict[str, float]:
        """||W_i - Z_i||_F per layer."""
        return {n: float(np.linalg.norm((self.W[n] - self.Z[n]).astype(np.float64))) for n in self.W}

    # Penalty protocol consumed by Trainer.fit
    def value(self) -> float:
        return penalty(self)

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{n}.weight": g.reshape(self.weight_shapes.get(n, g.shape)) for n, g in penalty_grad(self).items()}


# ---------- Projection ----------

def project_layer(m: np.ndarray, c: SparsityConstraint,
                  within: Optional[SparsityMask] = None) -> tuple[np.ndarray, SparsityMask]:
    """Project onto the layer's set; `within` restricts the support to an earlier stage's mask."""
    if within is None:
        return project(m, c)
    within = within.astype(bool)
    _, mask = project(apply_mask(m, within), c)
    mask = mask & within
    return apply_mask(m, mask), mask


def check_constraints(net: GraphNet, constraints: Constraints) -> None:
    prunable = {l.name: l for l in net.prunable_layers()}
    unknown = sorted(set(constraints) - set(prunable))
    if unknown:
        raise ConfigError(f"constraints name layers that are not prunable convolutions: {unknown}")
    missing = sorted(set(prunable) - set(constraints))
    if missing:
        raise ConfigError(f"prunable layers without a constraint: {missing}")
    for name, c in constraints.items():
        c.check_fits(*prunable[name].spec.gemm_shape)


def stage_constraints(constraints: Constraints, strategy: str) -> list[tuple[str, Constraints]]:
    """Split combined constraints into a filter stage and a column stage unless `joint`."""
    combined = any(c.mode is SparsityMode.combined for c in constraints.values())
    if not combined or strategy == "joint":
        return [("prune", dict(constraints))]
    filters, columns = {}, {}
    for name, c in constraints.items():
        if c.mode is SparsityMode.combined:
            filters[name] = SparsityConstraint(mode=SparsityMode.filter, alpha_filters=c.alpha_filters)
            columns[name] = SparsityConstraint(mode=SparsityMode.column, alpha_columns=c.alpha_columns)
        else:
            filters[name] = c
    return [("filter", filters), ("column", columns)]


# ---------- ADMM operations ----------

def init_state(net: GraphNet, constraints: Constraints, rho: float,
               within: Optional[Masks] = None) -> AdmmState:
    """Z_0 = proj(W_0), U_0 = 0."""
    within = within or {}
    W, Z, U, shapes = {}, {}, {}, {}
    for name, c in constraints.items():
        layer = net.layer(name)
        W[name] = to_gemm(layer.weight.data)
        Z[name], _ = project_layer(W[name], c, within.get(name))
        U[name] = np.zeros_like(W[name])
        shapes[name] = layer.spec.weight_shape
    return AdmmState(W=W, Z=Z, U=U, rho=rho, weight_shapes=shapes)


def penalty(state: AdmmState) -> float:
    total = 0.0
    for n in state.W:
        d = state.W[n].astype(np.float64) - state.Z[n] + state.U[n]
        total += 0.5 * state.rho * float(np.sum(d * d))
    return total


def penalty_grad(state: AdmmState) -> dict[str, np.ndarray]:
    """d penalty / d W_i = rho (W_i - Z_i + U_i)."""
    return {n: state.rho * (state.W[n] - state.Z[n] + state.U[n]) for n in state.W}


def augmented_loss(batch, state: AdmmState, task_loss: Callable[[object], float]) -> float:
    """Task loss on `batch` plus the ADMM penalty; Trainer.fit evaluates every penalized batch here."""
    loss = task_loss(batch) + state.value()
    if not np.isfinite(loss):
        raise DivergenceError(f"augmented loss is non-finite at ADMM iteration {state.k}")
    return loss


def admm_step(state: AdmmState, constraints: Constraints, within: Optional[Masks] = None,
              workers: int = 1) -> AdmmState:
    """Z <- proj(W + U); U <- U + W - Z. Layers are independent and may be projected in parallel."""
    within = within or {}
    names = list(state.W)

    def one(name: str) -> tuple[np.ndarray, np.ndarray]:
        w, u = state.W[name], state.U[name]
        z, _ = project_layer(w + u, constraints[name], within.get(name))
        return z, u + w - z

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, names))
    else:
        results = [one(n) for n in names]
    Z = {n: r[0] for n, r in zip(names, results)}
    U = {n: r[1] for n, r in zip(names, results)}
    return AdmmState(W=state.W, Z=Z, U=U, rho=state.rho, k=state.k + 1, weight_shapes=state.weight_shapes)


def masked_mapping(state: AdmmState, constraints: Constraints,
                   within: Optional[Masks] = None) -> tuple[dict[str, np.ndarray], Masks]:
    """Hard-project every W_i in place; returns copies of the projected weights and their masks."""
    within = within or {}
    weights, masks = {}, {}
    for name, w in state.W.items():
        projected, mask = project_layer(w, constraints[name], within.get(name))
        w[...] = projected
        weights[name], masks[name] = projected.copy(), mask
    return weights, masks


def retrain(trainer: Trainer, masks: Masks, epochs: int, desc: str = "retrain",
            on_step: Optional[Callable[[int, float], None]] = None) -> dict[str, np.ndarray]:
    """Masked fine-tuning; returns the retrained GEMM weights of the masked layers."""
    net = trainer.net
    for name, mask in masks.items():
        w = to_gemm(net.layer(name).weight.data)
        w[...] = apply_mask(w, mask)
    trainer.fit(epochs, masks=masks, desc=desc, on_step=on_step)
    return {name: to_gemm(net.layer(name).weight.data).copy() for name in masks}


# ---------- Engine ----------

class AdmmEngine:
    """Runs the three phases for one stage at a time and keeps the progress log."""

    def __init__(self, trainer: Trainer, schedule: PruneSchedule, workers: int = 1,
                 log_path: Optional[Path] = None) -> None:
        self.trainer = trainer
        self.net = trainer.net
        self.schedule = schedule
        self.workers = workers
        self.log_path = log_path
        self.trajectory: list[dict] = []
        self.masks: Masks = {}

    def _record(self, stage: str, state: AdmmState, loss: float) -> None:
        rec = {
            "stage": stage,
            "iteration": state.k,
            "loss": loss,
            "rho": state.rho,
            "per_layer": state.residuals(),
        }
        self.trajectory.append(rec)
        log.info("%s ADMM iteration %d: loss %.5f, max ||W-Z|| %.5f", stage, state.k, loss,
                 max(rec["per_layer"].values(), default=0.0))
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    def pre_prune(self, stage: str, constraints: Constraints,
                  on_iteration: Optional[Callable[[AdmmState], None]] = None) -> AdmmState:
        s = self.schedule
        frozen = dict(self.masks)
        state = init_state(self.net, constraints, s.rho, frozen)
        for it in range(s.admm_iterations):
            losses = self.trainer.fit(s.epochs_per_iteration, masks=frozen, penalty=state,
                                      desc=f"admm {stage} {it + 1}/{s.admm_iterations}")
            state = admm_step(state, constraints, frozen, self.workers)
            self._record(stage, state, losses[-1])
            if on_iteration is not None:
                on_iteration(state)
        return state

    def masked_mapping(self, state: AdmmState, constraints: Constraints) -> Masks:
        _, masks = masked_mapping(state, constraints, dict(self.masks))
        self.masks.update(masks)
        log.info("masked mapping: %d layers, %d weights retained", len(masks),
                 sum(int(m.sum()) for m in masks.values()))
        return masks

    def retrain(self, stage: str) -> dict[str, np.ndarray]:
        return retrain(self.trainer, self.masks, self.schedule.retrain_epochs, desc=f"retrain {stage}")

    def feasibility(self, constraints: Constraints) -> dict[str, bool]:
        return {n: is_feasible(to_gemm(self.net.layer(n).weight.data), c) for n, c in constraints.items()}
