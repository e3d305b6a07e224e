import os
import logging
from dotenv import load_dotenv, find_dotenv

load_dotenv(find_dotenv())

class ToolkitConfig:
    def __init__(self):
        self.log_level = os.getenv("LOG_LEVEL", "INFO").upper()
        self.max_runs = int(os.getenv("MAX_RUNS", 10))
        self.max_artifact_read_bytes = int(os.getenv("MAX_ARTIFACT_READ_BYTES", 2_000_000))
        self.max_seeds_per_run = int(os.getenv("MAX_SEEDS_PER_RUN", 50))
        # Runs started over MCP write here; the CLI uses run.output_dir instead
        self.workspace_root = os.path.abspath(os.getenv("OTDISTILL_WORKSPACE", "otdistill-runs"))

def get_config():
    config = ToolkitConfig()
    if not os.path.exists(config.workspace_root):
        try:
            os.makedirs(config.workspace_root)
            logging.info(f"Created workspace root at {config.workspace_root}")
        except Exception as e:
            logging.warning(f"Could not create workspace root: {e}")
    return config
