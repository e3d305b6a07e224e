from .config import get_config, ToolkitConfig
from .errors import DistillError
from .experiment_config import ExperimentConfig, load_config
from .ot_settings import SinkhornSettings

__version__ = "0.1.0"
__all__ = ["get_config", "ToolkitConfig", "DistillError", "ExperimentConfig", "load_config", "SinkhornSettings"]
