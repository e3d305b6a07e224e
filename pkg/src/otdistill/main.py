import logging
import sys
from typing import Optional, Dict, Any, List
from mcp.server.fastmcp import FastMCP
from otdistill.run_manager import RunManager
from otdistill.config import get_config
from otdistill.errors import DistillError, error_payload
from otdistill.harness import coverage
from otdistill.ot_core import (
    MAX_EXACT_POINTS,
    cost_matrix,
    exact_ot_assignment,
    scaled_regularization,
    sinkhorn_marginals,
    sinkhorn_uniform_log,
)
from otdistill.ot_settings import SinkhornSettings

config = get_config()

logging.basicConfig(
    level=config.log_level,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    stream=sys.stderr
)

logger = logging.getLogger(__name__)

mcp = FastMCP("OT Dataset Distillation")

run_manager = RunManager(config)


def success_payload(**kwargs: Any) -> Dict[str, Any]:
    return {"success": True, **kwargs}


def map_error(e: Exception, default_code: str, default_message: str) -> Dict[str, Any]:
    if isinstance(e, DistillError):
        return error_payload(
            e.code,
            e.message,
            retryable=e.retryable,
            details=e.details,
        )
    logger.exception(default_message)
    return error_payload(default_code, default_message, retryable=True, details={"reason": str(e)})

@mcp.tool()
async def generate_dataset(overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Write the synthetic train/test mixture for a data.* configuration into a new run."""
    try:
        return success_payload(**run_manager.generate_dataset(overrides))
    except Exception as e:
        return map_error(e, "generate_dataset_failed", "Failed to generate dataset")

@mcp.tool()
async def start_run(
    overrides: Optional[Dict[str, Any]] = None,
    config_text: Optional[str] = None,
) -> Dict[str, Any]:
    """Run sample -> relabel -> train -> evaluate for every run.seeds entry and keep the artifacts."""
    try:
        return success_payload(**run_manager.start_run(overrides, config_text))
    except Exception as e:
        return map_error(e, "run_failed", "Failed to run the distillation pipeline")

@mcp.tool()
async def list_runs() -> Dict[str, Any]:
    """List runs held by this server."""
    try:
        runs = run_manager.list_runs()
        return success_payload(
            runs=runs,
            count=len(runs),
        )
    except Exception as e:
        return map_error(e, "list_runs_failed", "Failed to list runs")

@mcp.tool()
async def close_run(run_id: str) -> Dict[str, Any]:
    """Delete a run and its artifacts."""
    try:
        run_manager.close_run(run_id)
        return success_payload(message=f"Closed run {run_id}")
    except Exception as e:
        return map_error(e, "run_close_failed", f"Failed to close run {run_id}")

@mcp.tool()
async def list_run_files(run_id: str, path: str = ".") -> Dict[str, Any]:
    """List artifacts in a run directory."""
    try:
        files = run_manager.list_files(run_id, path)
        return success_payload(files=files)
    except Exception as e:
        return map_error(e, "list_files_failed", f"Failed to list files for {run_id}")

@mcp.tool()
async def read_run_artifact(run_id: str, path: str) -> Dict[str, Any]:
    """Read a CSV or JSON artifact from a run."""
    try:
        content = run_manager.read_file(run_id, path)
        return success_payload(content=content)
    except Exception as e:
        return map_error(e, "read_file_failed", f"Failed to read artifact from {run_id}")

@mcp.tool()
async def sinkhorn_distance(
    a_points: List[List[float]],
    b_points: List[List[float]],
    p: float = 1.0,
    a_weights: Optional[List[float]] = None,
    b_weights: Optional[List[float]] = None,
    settings: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Entropic OT distance between two point sets; uniform weights unless given."""
    try:
        solver = SinkhornSettings.from_payload(settings, default_epsilon=1.0, default_iterations=100, default_p=p)
        D = cost_matrix(a_points, b_points, solver.p)
        # epsilon defaults to a tenth of the mean cost
        epsilon = solver.epsilon if settings and "epsilon" in settings else scaled_regularization(D, 0.1)
        if a_weights is None and b_weights is None:
            result = sinkhorn_uniform_log(D, epsilon, solver.iterations)
        else:
            n, m = D.shape
            a = a_weights if a_weights is not None else [1.0 / n] * n
            b = b_weights if b_weights is not None else [1.0 / m] * m
            result = sinkhorn_marginals(D, a, b, epsilon, solver.iterations, solver.delta)
        payload = success_payload(
            distance=result.distance,
            plan=result.plan.coupling.tolist(),
            iterations=result.iterations_run,
            max_marginal_violation=result.max_marginal_violation,
            raw_marginal_violation=result.raw_marginal_violation,
            epsilon=epsilon,
        )
        n, m = D.shape
        if a_weights is None and b_weights is None and n == m and n <= MAX_EXACT_POINTS:
            payload["exact_distance"] = exact_ot_assignment(a_points, b_points, solver.p)
        return payload
    except Exception as e:
        return map_error(e, "sinkhorn_failed", "Failed to compute the Sinkhorn distance")

@mcp.tool()
async def compute_coverage(
    real_points: List[List[float]],
    distilled_points: List[List[float]],
    threshold: float,
    p: float = 1.0,
) -> Dict[str, Any]:
    """Fraction of real points with a distilled neighbor within threshold."""
    try:
        return success_payload(coverage=coverage(real_points, distilled_points, threshold, p))
    except Exception as e:
        return map_error(e, "coverage_failed", "Failed to compute coverage")

if __name__ == "__main__":
    logger.info("Starting otdistill MCP Server...")
    mcp.run()
