from typing import Callable, Optional, TypedDict

from langgraph.graph import END, StateGraph

from src.slimdet.admm import AdmmEngine, AdmmState, check_constraints, stage_constraints
from src.slimdet.config import PruneSchedule, TrainConfig
from src.slimdet.metrics.accounting import PruneReport
from src.slimdet.nets.models import GraphNet
from src.slimdet.nets.trainer import Trainer

# on_phase(stage, phase, engine): called after every completed phase, e.g. to checkpoint
PhaseHook = Callable[[str, str, AdmmEngine], None]


class PipelineState(TypedDict, total=False):
    stage: int
    admm: AdmmState
    phases: list[str]


def build_graph(engine: AdmmEngine, stages: list, on_phase: Optional[PhaseHook] = None):
    def done(state: PipelineState, stage: str, phase: str) -> list[str]:
        if on_phase is not None:
            on_phase(stage, phase, engine)
        return state.get("phases", []) + [f"{stage}:{phase}"]

    # ---------------- Nodes ----------------
    def node_pre_prune(state: PipelineState) -> PipelineState:
        name, constraints = stages[state["stage"]]
        admm = engine.pre_prune(name, constraints)
        return {**state, "admm": admm, "phases": done(state, name, "pre_prune")}

    def node_masked_mapping(state: PipelineState) -> PipelineState:
        name, constraints = stages[state["stage"]]
        engine.masked_mapping(state["admm"], constraints)
        return {**state, "phases": done(state, name, "masked_mapping")}

    def node_retrain(state: PipelineState) -> PipelineState:
        name, _ = stages[state["stage"]]
        engine.retrain(name)
        return {**state, "stage": state["stage"] + 1, "phases": done(state, name, "retrain")}

    def route(state: PipelineState) -> str:
        return "pre_prune" if state["stage"] < len(stages) else END

    # ---------------- Graph ----------------
    graph = StateGraph(PipelineState)
    graph.add_node("pre_prune", node_pre_prune)
    graph.add_node("masked_mapping", node_masked_mapping)
    graph.add_node("retrain", node_retrain)
    graph.set_entry_point("pre_prune")
    graph.add_edge("pre_prune", "masked_mapping")
    graph.add_edge("masked_mapping", "retrain")
    graph.add_conditional_edges("retrain", route, {"pre_prune": "pre_prune", END: END})
    return graph.compile()


def run_pipeline(model: GraphNet, schedule: PruneSchedule, task, train: TrainConfig, seed: int = 0,
                 workers: int = 1, log_path=None, on_phase: Optional[PhaseHook] = None,
                 quiet: bool = True) -> tuple[GraphNet, PruneReport]:
    """Pre-prune, map and retrain `model` in place (once per stage); returns it with a report."""
    check_constraints(model, schedule.constraints)
    stages = stage_constraints(schedule.constraints, schedule.combined_strategy)
    trainer = Trainer(model, task, train, seed=seed, quiet=quiet)
    engine = AdmmEngine(trainer, schedule, workers=workers, log_path=log_path)

    metric_before = task.evaluate(model)
    graph = build_graph(engine, stages, on_phase)
    graph.invoke({"stage": 0, "phases": []})

    return model, PruneReport.build(
        model.manifest,
        engine.masks,
        feasible=engine.feasibility(schedule.constraints),
        loss_trajectory=engine.trajectory,
        metric_name=task.metric_name,
        metric_before=metric_before,
        metric_after=task.evaluate(model),
        seed=seed,
    )
