import sys
from pathlib import Path

import pytest

pytest.importorskip("fastmcp")

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import mcp_server

SMALL_CONFIG = """
data:
  synthetic: {n_examples: 40, seq_len: 4}
model:
  encoder: {n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, max_len: 8}
train: {epochs: 1, batch_size: 16}
"""


def call_tool(tool, *args, **kwargs):
    """Invoke an MCP tool regardless of FastMCP wrapping."""
    target = getattr(tool, "fn", tool)
    return target(*args, **kwargs)


@pytest.fixture
def workbench(monkeypatch, tmp_path):
    bench = mcp_server.ExperimentWorkbench(tmp_path)
    monkeypatch.setattr(mcp_server, "workbench", bench)
    (tmp_path / "small.yaml").write_text(SMALL_CONFIG)
    return bench


def test_health_check_reports_service(workbench):
    result = call_tool(mcp_server.health_check)
    assert result["status"] == "healthy"
    assert result["working_directory"] == str(workbench.base_dir)


def test_generate_dataset_resolves_relative_path(workbench):
    result = call_tool(mcp_server.generate_dataset, "data/train.csv", n_examples=30, seed=2)

    assert result["success"] is True
    assert (workbench.base_dir / "data" / "train.csv").exists()
    assert result["bayes_accuracy"]["joint"] == pytest.approx(0.98)


def test_generate_dataset_returns_validation_error(workbench):
    result = call_tool(mcp_server.generate_dataset, "x.csv", n_examples=1)

    assert result["success"] is False
    assert "n_examples" in result["error"]


def test_train_evaluate_and_describe(workbench):
    trained = call_tool(mcp_server.train_model, "runs/isfl", config_path="small.yaml", insert_layer_index=0)
    assert trained["success"] is True, trained
    assert len(trained["epochs"]) == 1

    evaluated = call_tool(mcp_server.evaluate_checkpoint, "runs/isfl/model.ckpt", output_dir="reports/isfl")
    assert evaluated["success"] is True, evaluated
    assert "ece" in evaluated["report"]
    assert (workbench.base_dir / "reports" / "isfl" / "report.json").exists()

    described = call_tool(mcp_server.describe_checkpoint, "runs/isfl/model.ckpt")
    assert described["has_isfl"] is True
    assert described["insert_layer_index"] == 0

    listing = call_tool(mcp_server.list_checkpoints)
    assert listing["count"] == 1


def test_train_model_reports_invalid_layer(workbench):
    result = call_tool(mcp_server.train_model, "runs/bad", config_path="small.yaml", insert_layer_index=4)

    assert result["success"] is False
    assert "insert_layer_index" in result["error"]


def test_evaluate_missing_checkpoint(workbench):
    result = call_tool(mcp_server.evaluate_checkpoint, "runs/none/model.ckpt")
    assert result["success"] is False
    assert "not found" in result["error"]
