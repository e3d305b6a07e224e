import os
import sys

import pytest


ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
SRC = os.path.join(ROOT, "src")
if SRC not in sys.path:
    sys.path.insert(0, SRC)


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Run workspace for the MCP server, isolated per test."""
    root = tmp_path / "runs"
    monkeypatch.setenv("OTDISTILL_WORKSPACE", str(root))
    monkeypatch.setenv("LOG_LEVEL", "WARNING")
    return root
