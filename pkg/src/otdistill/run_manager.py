from __future__ import annotations

import logging
import shutil
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from otdistill.artifact_paths import ArtifactPath, resolve_in_run
from otdistill.data_gen import write_dataset_csv, make_gmm_dataset
from otdistill.errors import DistillError
from otdistill.experiment_config import ExperimentConfig, read_config_lines
from otdistill.harness import run_pipeline

logger = logging.getLogger(__name__)


class RunManager:
    """Tracks pipeline runs started through the MCP server, one directory per run under the workspace root."""

    def __init__(self, config):
        self.config = config
        self.runs: Dict[str, dict] = {}

    def _new_run(self, kind: str, experiment: ExperimentConfig) -> tuple:
        if len(self.runs) >= self.config.max_runs:
            raise DistillError("max_runs_reached", "Maximum number of runs reached", details={"max_runs": self.config.max_runs})
        run_id = str(uuid.uuid4())
        directory = Path(self.config.workspace_root) / run_id
        directory.mkdir(parents=True, exist_ok=True)
        run = {
            "kind": kind,
            "directory": directory,
            "config_hash": experiment.run_id(),
            "created_at": datetime.now(),
            "last_used": datetime.now(),
            "journal": [],
            "summary": {},
        }
        self.runs[run_id] = run
        return run_id, run

    def _build_config(self, overrides: Optional[Mapping[str, Any]], config_text: Optional[str]) -> ExperimentConfig:
        entries: Dict[str, str] = {}
        if config_text:
            entries.update(read_config_lines(config_text.splitlines()))
        for key, value in (overrides or {}).items():
            entries[str(key)] = str(value)
        return ExperimentConfig.from_mapping(entries)

    def generate_dataset(self, overrides: Optional[Mapping[str, Any]] = None) -> dict:
        experiment = self._build_config(overrides, None)
        run_id, run = self._new_run("dataset", experiment)
        train, test = make_gmm_dataset(experiment.gmm_spec(), experiment.data.seed)
        write_dataset_csv(train, run["directory"] / "train.csv")
        write_dataset_csv(test, run["directory"] / "test.csv")
        run["summary"] = {"train_points": len(train), "test_points": len(test), "dim": train.dim}
        run["journal"].append({"timestamp": datetime.now().isoformat(), "success": True, "action": "generate_dataset"})
        logger.info(f"Generated dataset for run {run_id}")
        return {"run_id": run_id, **run["summary"]}

    def start_run(
        self,
        overrides: Optional[Mapping[str, Any]] = None,
        config_text: Optional[str] = None,
    ) -> dict:
        experiment = self._build_config(overrides, config_text)
        if len(experiment.run.seeds) > self.config.max_seeds_per_run:
            raise DistillError(
                "too_many_seeds",
                "run lists more seeds than allowed",
                details={"max_seeds_per_run": self.config.max_seeds_per_run},
            )
        run_id, run = self._new_run("pipeline", experiment)
        try:
            report = run_pipeline(experiment, output_dir=run["directory"])
        except DistillError as e:
            run["journal"].append({"timestamp": datetime.now().isoformat(), "success": False, "code": e.code})
            raise
        for result in report.results:
            run["journal"].append(
                {
                    "timestamp": datetime.now().isoformat(),
                    "success": True,
                    "seed": result.seed,
                    "timings": result.timings,
                }
            )
        run["summary"] = {
            "config_hash": report.run_id,
            "mean_accuracy": report.mean_accuracy,
            "std_accuracy": report.std_accuracy,
            "alphas": report.alphas,
        }
        logger.info(f"Finished run {run_id}: mean accuracy {report.mean_accuracy:.4f}")
        return {"run_id": run_id, **run["summary"]}

    def close_run(self, run_id: str):
        run = self.runs.get(run_id)
        if run is None:
            raise DistillError("run_not_found", f"Run {run_id} not found")
        try:
            shutil.rmtree(run["directory"], ignore_errors=False)
        except FileNotFoundError:
            pass
        except OSError as e:
            logger.error(f"Failed to remove run directory {run['directory']}: {e}")
            raise DistillError("run_close_failed", f"Failed to close run {run_id}", retryable=True)
        del self.runs[run_id]
        logger.info(f"Closed run {run_id}")

    def _require_run(self, run_id: str) -> Dict[str, Any]:
        run = self.runs.get(run_id)
        if run is None:
            raise DistillError("run_not_found", f"Run {run_id} not found")
        run["last_used"] = datetime.now()
        return run

    def _resolve(self, run: Dict[str, Any], path: str) -> ArtifactPath:
        try:
            return resolve_in_run(run["directory"], path)
        except ValueError as e:
            raise DistillError("invalid_path", str(e))

    def list_files(self, run_id: str, path: str = ".") -> list:
        run = self._require_run(run_id)
        target = self._resolve(run, path)
        if not target.absolute.is_dir():
            raise DistillError("list_files_failed", f"{path} is not a directory in run {run_id}")
        files = []
        for entry in sorted(target.absolute.iterdir()):
            relative_path = entry.name if target.relative == "." else f"{target.relative}/{entry.name}"
            files.append({"name": entry.name, "is_dir": entry.is_dir(), "path": relative_path})
        return files

    def read_file(self, run_id: str, path: str) -> str:
        run = self._require_run(run_id)
        target = self._resolve(run, path).absolute
        if not target.is_file():
            raise DistillError("read_file_failed", f"{path} is not a file in run {run_id}")
        if target.stat().st_size > self.config.max_artifact_read_bytes:
            raise DistillError(
                "file_too_large",
                "artifact exceeds max read size",
                details={"max_artifact_read_bytes": self.config.max_artifact_read_bytes},
            )
        return target.read_text(encoding="utf-8", errors="replace")

    def list_runs(self) -> list:
        return [
            {
                "id": run_id,
                "kind": run["kind"],
                "config_hash": run["config_hash"],
                "created_at": run["created_at"].isoformat(),
                "last_used": run["last_used"].isoformat(),
                "history_count": len(run.get("journal", [])),
                "summary": run.get("summary", {}),
            }
            for run_id, run in self.runs.items()
        ]
