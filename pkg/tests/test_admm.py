import itertools

import numpy as np
import pytest

from src.slimdet import admm
from src.slimdet.admm import (
    AdmmEngine,
    AdmmState,
    admm_step,
    augmented_loss,
    check_constraints,
    init_state,
    masked_mapping,
    penalty,
    penalty_grad,
    retrain,
    stage_constraints,
)
from src.slimdet.config import PruneSchedule, TrainConfig
from src.slimdet.errors import AlphaRangeError, ConfigError, DivergenceError
from src.slimdet.graph import run_pipeline
from src.slimdet.nets.data import make_classification
from src.slimdet.nets.models import tiny_classifier
from src.slimdet.nets.trainer import ClassifyTask, Trainer
from src.slimdet.sparsity import (
    SparsityConstraint,
    SparsityMode,
    check_mask_structure,
    constraint_from_ratios,
    full_constraint,
    is_feasible,
    project_irregular,
)
from src.slimdet.tensor_core import to_gemm


def _state(W, Z, U, rho) -> AdmmState:
    arr = lambda v: np.asarray(v, dtype=np.float64)  # noqa: E731
    return AdmmState(W={"l": arr(W)}, Z={"l": arr(Z)}, U={"l": arr(U)}, rho=rho)


def _desk(seed: int = 0, n: int = 64):
    net = tiny_classifier(seed=seed)
    task = ClassifyTask(make_classification(n, seed=seed), make_classification(32, seed=seed + 1))
    trainer = Trainer(net, task, TrainConfig(epochs=1, batch_size=32), seed=seed)
    return net, task, trainer


def _constraints(net, mode=SparsityMode.combined, **ratios):
    ratios = ratios or {"filter_ratio": 2, "column_ratio": 2, "weight_ratio": 4}
    return {l.name: constraint_from_ratios(*l.spec.gemm_shape, mode, **ratios) for l in net.prunable_layers()}


# ---------- Penalty ----------

def test_augmented_loss_examples():
    task = lambda batch: 1.25  # noqa: E731
    assert augmented_loss(None, _state([[1.0]], [[0.0]], [[1.0]], rho=0.0), task) == 1.25
    assert augmented_loss(None, _state([[0.5, 2.0]], [[0.5, 2.0]], [[0.0, 0.0]], rho=3.0), task) == 1.25
    assert augmented_loss(None, _state([[1.0]], [[0.0]], [[1.0]], rho=2.0), task) == 1.25 + 4.0


@pytest.mark.parametrize("seed", range(20))
def test_penalty_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    s = _state(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rho=rng.uniform(0.1, 3))
    grad = penalty_grad(s)["l"]
    eps = 1e-6
    for idx in itertools.product(range(3), range(4)):
        w = s.W["l"]
        old = w[idx]
        w[idx] = old + eps
        up = penalty(s)
        w[idx] = old - eps
        down = penalty(s)
        w[idx] = old
        assert grad[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-6)


def test_negative_rho_is_rejected():
    with pytest.raises(ConfigError):
        _state([[1.0]], [[0.0]], [[0.0]], rho=-1.0)


def test_fit_evaluates_penalized_batches_through_the_augmented_loss(monkeypatch):
    net, _, trainer = _desk()
    state = init_state(net, _constraints(net), rho=1e-2)
    seen = []

    def recording(batch, s, task_loss):
        value = augmented_loss(batch, s, task_loss)
        seen.append((value, s.value()))
        return value

    monkeypatch.setattr(admm, "augmented_loss", recording)
    history = trainer.fit(1, penalty=state)
    # 64 examples in two batches of 32
    assert len(seen) == 2
    assert all(p > 0 for _, p in seen)
    assert history[0] == pytest.approx(np.mean([v for v, _ in seen]))


def test_fit_stops_on_a_non_finite_penalty():
    net, _, trainer = _desk()
    state = init_state(net, _constraints(net), rho=1e-2)
    state.U["conv1"][...] = np.inf
    with pytest.raises(DivergenceError, match="augmented loss"):
        trainer.fit(1, penalty=state)


# ---------- ADMM step ----------

def test_admm_step_example():
    c = {"l": SparsityConstraint(mode=SparsityMode.irregular, alpha_weights=2)}
    s = _state([[1.0, -5.0], [3.0, 2.0]], np.zeros((2, 2)), np.zeros((2, 2)), rho=1.0)
    nxt = admm_step(s, c)
    assert nxt.Z["l"].tolist() == [[0, -5], [3, 0]]
    assert nxt.U["l"].tolist() == [[1, 0], [0, 2]]
    assert nxt.k == 1
    # W + U = [[2, -5], [3, 4]] keeps -5 and 4
    nxt = admm_step(nxt, c)
    assert nxt.Z["l"].tolist() == [[0, -5], [0, 4]]
    assert nxt.U["l"].tolist() == [[2, 0], [3, 0]]
    assert nxt.k == 2


def test_admm_step_on_a_feasible_point_leaves_no_dual():
    c = {"l": SparsityConstraint(mode=SparsityMode.irregular, alpha_weights=2)}
    s = _state([[0.0, -5.0], [3.0, 0.0]], np.zeros((2, 2)), np.zeros((2, 2)), rho=1.0)
    nxt = admm_step(s, c)
    assert np.array_equal(nxt.Z["l"], s.W["l"])
    assert not nxt.U["l"].any()


def test_parallel_projection_matches_serial():
    net, _, _ = _desk()
    constraints = _constraints(net)
    s = init_state(net, constraints, rho=1e-3)
    a, b = admm_step(s, constraints), admm_step(s, constraints, workers=4)
    for n in constraints:
        assert np.array_equal(a.Z[n], b.Z[n]) and np.array_equal(a.U[n], b.U[n])


def test_feasibility_and_dual_identity_over_nine_iterations():
    net, _, trainer = _desk()
    constraints = _constraints(net)
    state = init_state(net, constraints, rho=1e-2)
    for _ in range(9):
        trainer.fit(1, penalty=state)
        prev = state
        state = admm_step(state, constraints)
        for n, c in constraints.items():
            Z = state.Z[n]
            assert is_feasible(Z, c)
            nz = Z != 0
            assert int(nz.any(axis=1).sum()) <= c.alpha_filters
            assert int(nz.any(axis=0).sum()) <= c.alpha_columns
            dual_residual = (state.U[n] - prev.U[n]) - (state.W[n] - state.Z[n])
            scale = max(1.0, *(float(np.abs(a).max()) for a in (state.U[n], prev.U[n], state.W[n], Z)))
            assert np.abs(dual_residual).max() <= 1e-5 * scale
    assert state.k == 9


@pytest.mark.parametrize("seed", range(5))
def test_toy_problem_converges_to_the_best_sparse_approximation(seed):
    # f(W) = ||W - W*||^2 has the closed-form W-update W = (2 W* + rho (Z - U)) / (2 + rho)
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(3, 3))
    alpha, rho = 4, 2.0
    c = {"l": SparsityConstraint(mode=SparsityMode.irregular, alpha_weights=alpha)}
    s = _state(target.copy(), project_irregular(target, alpha), np.zeros((3, 3)), rho)
    for _ in range(50):
        s.W["l"][...] = (2 * target + rho * (s.Z["l"] - s.U["l"])) / (2 + rho)
        s = admm_step(s, c)

    best, best_cost = None, np.inf
    for support in itertools.combinations(range(9), alpha):
        cand = np.zeros(9)
        cand[list(support)] = target.ravel()[list(support)]
        cost = np.sum((target.ravel() - cand) ** 2)
        if cost < best_cost:
            best, best_cost = cand.reshape(3, 3), cost
    assert np.max(np.abs(s.Z["l"] - best)) <= 1e-3
    assert np.max(np.abs(s.W["l"] - best)) <= 1e-3


# ---------- Constraints ----------

def test_constraints_must_cover_prunable_layers():
    net, _, _ = _desk()
    constraints = _constraints(net)
    check_constraints(net, constraints)
    with pytest.raises(ConfigError):
        check_constraints(net, {**constraints, "conv0": constraints["conv1"]})
    with pytest.raises(ConfigError):
        check_constraints(net, {"conv1": constraints["conv1"]})
    too_many = SparsityConstraint(mode=SparsityMode.filter, alpha_filters=999)
    with pytest.raises(AlphaRangeError):
        check_constraints(net, {**constraints, "conv1": too_many})


def test_combined_constraints_run_as_two_stages():
    c = {"a": SparsityConstraint(mode=SparsityMode.combined, alpha_filters=4, alpha_columns=9)}
    stages = stage_constraints(c, "sequential")
    assert [name for name, _ in stages] == ["filter", "column"]
    assert stages[0][1]["a"].mode is SparsityMode.filter and stages[0][1]["a"].alpha_filters == 4
    assert stages[1][1]["a"].mode is SparsityMode.column and stages[1][1]["a"].alpha_columns == 9
    assert [name for name, _ in stage_constraints(c, "joint")] == ["prune"]


# ---------- Masked mapping and retraining ----------

def test_masked_mapping_makes_the_network_feasible():
    net, _, _ = _desk()
    constraints = _constraints(net)
    state = init_state(net, constraints, rho=1e-3)
    weights, masks = masked_mapping(state, constraints)
    for n, c in constraints.items():
        live = to_gemm(net.layer(n).weight.data)
        assert is_feasible(live, c)
        assert np.array_equal(live, weights[n])
        assert check_mask_structure(masks[n], SparsityMode.combined, c)


def test_masked_mapping_of_a_feasible_network_changes_nothing():
    net, _, _ = _desk()
    constraints = _constraints(net, SparsityMode.filter, filter_ratio=2)
    masked_mapping(init_state(net, constraints, rho=1e-3), constraints)
    before = net.state_dict()
    masked_mapping(init_state(net, constraints, rho=1e-3), constraints)
    assert all(np.array_equal(before[k], v) for k, v in net.state_dict().items())


def test_retrain_keeps_the_support_fixed_at_every_step():
    net, _, trainer = _desk()
    rng = np.random.default_rng(0)
    masks = {l.name: rng.random(l.spec.gemm_shape) < 0.5 for l in net.prunable_layers()}

    def check(step, loss):
        for n, m in masks.items():
            assert np.array_equal(to_gemm(net.layer(n).weight.data) != 0, m)

    weights = retrain(trainer, masks, epochs=2, on_step=check)
    for n, m in masks.items():
        assert np.array_equal(weights[n] != 0, m)


def test_retrain_with_empty_masks_leaves_weights_at_zero():
    net, _, trainer = _desk()
    masks = {l.name: np.zeros(l.spec.gemm_shape, dtype=bool) for l in net.prunable_layers()}
    retrain(trainer, masks, epochs=2)
    assert all(not net.layer(n).weight.data.any() for n in masks)


# ---------- Engine and pipeline ----------

def test_engine_logs_one_record_per_iteration(tmp_path):
    net, _, trainer = _desk()
    schedule = PruneSchedule(admm_iterations=3, retrain_epochs=1, rho=1e-2)
    engine = AdmmEngine(trainer, schedule, log_path=tmp_path / "admm_log.jsonl")
    seen = []
    engine.pre_prune("filter", _constraints(net, SparsityMode.filter, filter_ratio=2), on_iteration=seen.append)
    lines = (tmp_path / "admm_log.jsonl").read_text().splitlines()
    assert len(lines) == len(seen) == 3
    assert [r["iteration"] for r in engine.trajectory] == [1, 2, 3]
    assert set(engine.trajectory[0]["per_layer"]) == {"conv1", "conv2"}


def test_identity_schedule_reports_no_compression():
    net, task, _ = _desk()
    constraints = {l.name: full_constraint(*l.spec.gemm_shape, SparsityMode.combined) for l in net.prunable_layers()}
    schedule = PruneSchedule(admm_iterations=1, retrain_epochs=1, constraints=constraints)
    _, report = run_pipeline(net, schedule, task, TrainConfig(batch_size=32), seed=0)
    assert report.ratio == 1.0
    assert report.params_after == report.params_before
    assert all(report.feasible.values())


def test_pipeline_runs_filter_then_column_stage():
    net, task, _ = _desk()
    schedule = PruneSchedule(admm_iterations=2, retrain_epochs=1, rho=1e-2, constraints=_constraints(net))
    phases = []
    model, report = run_pipeline(net, schedule, task, TrainConfig(batch_size=32), seed=0,
                                 on_phase=lambda stage, phase, engine: phases.append(f"{stage}:{phase}"))
    assert phases == [
        "filter:pre_prune", "filter:masked_mapping", "filter:retrain",
        "column:pre_prune", "column:masked_mapping", "column:retrain",
    ]
    assert report.pruned_ratio == pytest.approx(4.0)
    assert all(report.feasible.values())
    assert len(report.loss_trajectory) == 4
    for layer in model.prunable_layers():
        w = to_gemm(layer.weight.data)
        assert is_feasible(w, schedule.constraints[layer.name])
