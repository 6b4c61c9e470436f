import os
from typing import Optional

import typer
from dotenv import load_dotenv
from rich import print as rprint
from rich.markup import escape

load_dotenv()
# BLAS pools are sized when numpy is first imported
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.getenv("SLIMDET_THREADS", "1"))

from src.slimdet.config import RunConfig, Settings, Task  # noqa: E402
from src.slimdet.errors import ConfigError, InsufficientDataError, SlimdetError  # noqa: E402
from src.slimdet.log import setup_logging  # noqa: E402

app = typer.Typer(add_completion=False, help="Structured ADMM pruning for convolutional detectors.")

EXIT_USAGE = 1
EXIT_FAILURE = 2


def _config(task: Task, config: Optional[str], seed: Optional[int], out: Optional[str], **extra) -> RunConfig:
    settings = Settings.from_env()
    setup_logging(settings.log_level)
    return RunConfig.load(config, settings, task=task, seed=seed, out_dir=out, **extra)


def _run(fn):
    """Run a command body, mapping slimdet errors to exit codes with a one-line diagnostic."""
    try:
        return fn()
    except (ConfigError, InsufficientDataError, FileNotFoundError) as e:
        rprint(f"[bold red]error[/bold red]: {escape(str(e))}")
        raise typer.Exit(EXIT_USAGE)
    except SlimdetError as e:
        rprint(f"[bold red]{type(e).__name__}[/bold red]: {escape(str(e))}")
        raise typer.Exit(EXIT_FAILURE)


ConfigOpt = typer.Option(None, "--config", help="JSON run configuration")
SeedOpt = typer.Option(None, "--seed", help="Random seed (overrides the config)")
OutOpt = typer.Option(None, "--out", help="Output directory (overrides the config)")
ModelOpt = typer.Option(None, "--model", help="Model archive directory")


@app.command()
def train(config: Optional[str] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[str] = OutOpt):
    """Train a desk-scale classifier or detector from scratch."""
    from src.slimdet.commands import cmd_train

    def body():
        cfg = _config(Task.train, config, seed, out)
        path, metric = cmd_train(cfg, quiet=False)
        rprint(f"[bold green]Trained[/bold green] -> {path}  (metric {metric:.4f})")

    _run(body)


@app.command()
def prune(config: Optional[str] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[str] = OutOpt,
          model: Optional[str] = ModelOpt,
          workers: int = typer.Option(1, help="Threads for the per-layer projections")):
    """Pre-prune with ADMM, hard-map to the sparsity sets and retrain with masks."""
    from src.slimdet.commands import cmd_prune
    from src.slimdet.reporting import fmt_ratio, render, report_tables

    def body():
        cfg = _config(Task.prune, config, seed, out, model=model)
        path, report = cmd_prune(cfg, quiet=False, workers=workers)
        typer.echo(render(*report_tables(report, cfg.targets.mode.value, cite=False)))
        rprint(f"[bold green]Pruned[/bold green] -> {path}  ({fmt_ratio(report.ratio)})")

    _run(body)


@app.command()
def sweep(config: Optional[str] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[str] = OutOpt,
          model: Optional[str] = ModelOpt,
          workers: int = typer.Option(1, help="Threads for the per-layer projections")):
    """Prune one model across sparsity modes and ratios; one results row per run."""
    from src.slimdet.commands import cmd_sweep
    from src.slimdet.reporting import cited_table, render, sweep_results_table

    def body():
        cfg = _config(Task.sweep, config, seed, out, model=model)
        result = cmd_sweep(cfg, quiet=False, workers=workers)
        typer.echo(render(sweep_results_table(result), cited_table()))
        rprint(f"[bold green]Swept[/bold green] {len(result.rows) - 1} runs -> {cfg.out_dir}")

    _run(body)


@app.command(name="eval")
def evaluate(config: Optional[str] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[str] = OutOpt,
             model: Optional[str] = ModelOpt,
             predictions: Optional[str] = typer.Option(None, help="Predictions JSONL (image_id, box, score)"),
             truths: Optional[str] = typer.Option(None, help="Ground truth JSONL (image_id, box)")):
    """mAP across the IoU threshold sweep."""
    from src.slimdet.commands import cmd_eval
    from src.slimdet.reporting import render, sweep_table

    def body():
        cfg = _config(Task.eval, config, seed, out, model=model)
        sweep = cmd_eval(cfg, predictions, truths)
        typer.echo(render(sweep_table(sweep)))

    _run(body)


@app.command()
def report(config: Optional[str] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[str] = OutOpt,
           model: Optional[str] = ModelOpt,
           manifest: Optional[str] = typer.Option(None, help="Layer manifest (path or bundled name)"),
           self_test: bool = typer.Option(False, "--self-test", help="Cross-check the accounting against cited figures")):
    """Parameter, FLOP and storage accounting for an archive or a manifest."""
    from src.slimdet.reporting import cited_table, render, self_test as run_self_test, self_test_table

    def body():
        if self_test:
            setup_logging(Settings.from_env().log_level)
            checks = run_self_test(manifest or "yolov3_320")
            typer.echo(render(self_test_table(checks), cited_table()))
            if not all(c.ok for c in checks):
                raise typer.Exit(EXIT_FAILURE)
            return
        from src.slimdet.commands import cmd_report
        from src.slimdet.reporting import report_tables

        cfg = _config(Task.report, config, seed, out, model=model)
        result = cmd_report(cfg, manifest)
        typer.echo(render(*report_tables(result, cfg.targets.mode.value, cite=False)))

    _run(body)


@app.command()
def anchors(config: Optional[str] = ConfigOpt, seed: Optional[int] = SeedOpt, out: Optional[str] = OutOpt,
            k: Optional[int] = typer.Option(None, "--k", help="Number of anchors")):
    """k-means (1 - IoU) anchor sizes from the dataset's boxes."""
    from src.slimdet.commands import cmd_anchors

    def body():
        cfg = _config(Task.anchors, config, seed, out, anchors_k=k)
        for i, group in enumerate(cmd_anchors(cfg)):
            rprint(f"scale {i}: " + ", ".join(f"({w:.1f}, {h:.1f})" for w, h in group))

    _run(body)


if __name__ == "__main__":
    app()
