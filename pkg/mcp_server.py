#!/usr/bin/env python3
"""
ISFL Experiment MCP Server
A Model Context Protocol server exposing the fusion experiment pipeline
as tools over stdio.

Tools cover:
- Generating synthetic datasets
- Training a model and writing its checkpoint
- Evaluating a checkpoint on its held-out split
- Sweeping ISFL insertion layers against the baselines
- Describing and listing checkpoints
"""

from fastmcp import FastMCP
from pathlib import Path
from typing import Any, Dict, List, Optional

from checkpoint_manager import CheckpointManager
from data_pipeline import bayes_accuracy, generate_synthetic, write_dataset
from errors import IsflError
from experiment_config import apply_overrides, load_config_file, validate_experiment
from isfl_cli import run_evaluation, run_sweep, run_training

SERVER_VERSION = "1.0.0"

# Create the MCP server instance
mcp = FastMCP(
    name="ISFL Experiment Server",
    version=SERVER_VERSION,
    instructions="Tools for training and evaluating mid-stack fused text classifiers",
)


class ExperimentWorkbench:
    """Holds the working directory that relative tool paths resolve against."""

    def __init__(self, base_dir: Optional[Path] = None):
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.checkpoint_manager = CheckpointManager(self.base_dir / "runs")

    def resolve(self, path: str) -> Path:
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.base_dir / candidate

    def experiment(self, config_path: Optional[str], overrides: List) -> Any:
        raw = load_config_file(self.resolve(config_path)) if config_path else {}
        return validate_experiment(apply_overrides(raw, overrides))


# Create global workbench instance
workbench = ExperimentWorkbench()


def _failure(action: str, exc: Exception) -> Dict[str, Any]:
    result = {"success": False, "error": f"Failed to {action}: {exc}"}
    if not isinstance(exc, IsflError):
        result["error_type"] = type(exc).__name__
    return result


@mcp.tool
def health_check() -> Dict[str, Any]:
    """Health check endpoint to verify the experiment server is running correctly."""
    return {
        "status": "healthy",
        "service": "isfl-experiment-server",
        "version": SERVER_VERSION,
        "working_directory": str(workbench.base_dir),
    }


@mcp.tool
def generate_dataset(
    out_path: str,
    n_examples: int = 2000,
    seed: int = 0,
    interaction_strength: Optional[float] = None,
    noise_rate: Optional[float] = None,
) -> Dict[str, Any]:
    """Write a synthetic text x aux dataset file.

    Returns:
        Dictionary with the dataset path and the task's Bayes accuracies
    """
    try:
        config = workbench.experiment(None, [
            ("data.synthetic.n_examples", n_examples),
            ("data.synthetic.seed", seed),
            ("data.synthetic.interaction_strength", interaction_strength),
            ("data.synthetic.noise_rate", noise_rate),
        ])
        task = config.data.task
        path = write_dataset(generate_synthetic(task), workbench.resolve(out_path))
        return {"success": True, "path": str(path), "n_examples": task.n_examples, "bayes_accuracy": bayes_accuracy(task)}
    except Exception as e:
        return _failure("generate dataset", e)


@mcp.tool
def train_model(
    output_dir: str,
    config_path: Optional[str] = None,
    fusion_mode: Optional[str] = None,
    insert_layer_index: Optional[int] = None,
    epochs: Optional[int] = None,
    seed: Optional[int] = None,
    data_path: Optional[str] = None,
) -> Dict[str, Any]:
    """Train one model and write its checkpoint and epoch log.

    Args:
        output_dir: Run directory for checkpoint, log and config
        config_path: Optional YAML/JSON experiment config
        fusion_mode: none, concat_head, late_gate or isfl
        insert_layer_index: ISFL insertion boundary (isfl only)
    """
    try:
        overrides = [
            ("model.fusion_mode", fusion_mode),
            ("model.fusion.insert_layer_index", insert_layer_index),
            ("train.epochs", epochs),
            ("train.seed", seed),
            ("output_dir", str(workbench.resolve(output_dir))),
        ]
        if data_path is not None:
            overrides.append(("data", {"path": str(workbench.resolve(data_path))}))
        run = run_training(workbench.experiment(config_path, overrides))
        return {
            "success": True,
            "checkpoint": str(run.checkpoint_path),
            "training_log": str(run.log_path),
            "epochs": [record.to_dict() for record in run.history.epochs],
            "optimizer_steps": run.history.optimizer_steps,
        }
    except Exception as e:
        return _failure("train model", e)


@mcp.tool
def evaluate_checkpoint(checkpoint: str, output_dir: Optional[str] = None, n_bins: Optional[int] = None) -> Dict[str, Any]:
    """Evaluate a checkpoint on its held-out split and write the report files."""
    try:
        result = run_evaluation(
            workbench.resolve(checkpoint),
            out_dir=workbench.resolve(output_dir) if output_dir else None,
            n_bins=n_bins,
        )
        return {"success": True, "report": result.report.to_dict(), "files": result.files}
    except Exception as e:
        return _failure(f"evaluate checkpoint {checkpoint}", e)


@mcp.tool
def run_layer_sweep(
    layers: List[int],
    output_dir: str,
    config_path: Optional[str] = None,
    with_late_gate: bool = False,
    workers: int = 1,
) -> Dict[str, Any]:
    """Train ISFL at each insertion layer plus the none/concat_head baselines; returns the comparison table."""
    try:
        config = workbench.experiment(config_path, [])
        result = run_sweep(config, layers, with_late_gate=with_late_gate, workers=workers,
                           out_dir=workbench.resolve(output_dir))
        failed = [row["configuration"] for row in result.rows if row["status"] != "ok"]
        return {"success": not failed, "rows": result.rows, "files": result.files, "failed": failed}
    except Exception as e:
        return _failure("run layer sweep", e)


@mcp.tool
def describe_checkpoint(checkpoint: str) -> Dict[str, Any]:
    """Summarize a checkpoint's configuration and parameter shapes."""
    return workbench.checkpoint_manager.describe(str(workbench.resolve(checkpoint)))


@mcp.tool
def list_checkpoints() -> Dict[str, Any]:
    """List checkpoints under the workbench runs directory."""
    return workbench.checkpoint_manager.list_checkpoints()


if __name__ == "__main__":
    mcp.run()
