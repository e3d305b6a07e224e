import asyncio
import importlib

import pytest

from otdistill.config import ToolkitConfig


@pytest.fixture
def server(workspace):
    import otdistill.main as main

    return importlib.reload(main)


def test_toolkit_config_reads_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MAX_RUNS", "2")
    monkeypatch.setenv("LOG_LEVEL", "debug")
    monkeypatch.setenv("OTDISTILL_WORKSPACE", str(tmp_path))
    config = ToolkitConfig()
    assert config.max_runs == 2
    assert config.log_level == "DEBUG"
    assert config.workspace_root == str(tmp_path)


def test_sinkhorn_distance_tool_reports_exact_value(server):
    result = asyncio.run(server.sinkhorn_distance([[0.0], [1.0]], [[0.0], [3.0]], p=1.0, settings={"epsilon": 0.01, "iterations": 500}))
    assert result["success"] is True
    assert result["exact_distance"] == pytest.approx(1.0)
    assert result["distance"] == pytest.approx(1.0, abs=1e-3)


def test_sinkhorn_distance_tool_with_weights(server):
    result = asyncio.run(
        server.sinkhorn_distance([[0.0]], [[2.0], [4.0]], a_weights=[1.0], b_weights=[0.5, 0.5])
    )
    assert result["distance"] == pytest.approx(3.0)
    assert "exact_distance" not in result


def test_tool_errors_are_payloads(server):
    result = asyncio.run(server.sinkhorn_distance([[0.0, 1.0]], [[0.0]]))
    assert result["success"] is False
    assert result["error"]["code"] == "size_mismatch"
    result = asyncio.run(server.compute_coverage([[0.0]], [[0.0]], threshold=-1.0))
    assert result["error"]["code"] == "invalid_input"


def test_unknown_run_is_reported(server):
    result = asyncio.run(server.read_run_artifact("missing", "report.csv"))
    assert result["error"]["code"] == "run_not_found"


def test_server_creates_workspace_root(server, workspace):
    assert workspace.is_dir()
    assert server.run_manager.config.workspace_root == str(workspace)
