"""Desk-scale lab for backdoor purification and post-purification robustness."""
from .config import ExperimentConfig, load_config, settings
from .errors import CheckpointError, ConfigError, InvalidInputError, LabError, TrainingDivergedError
from .pipeline import Lab

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ExperimentConfig",
    "InvalidInputError",
    "Lab",
    "LabError",
    "TrainingDivergedError",
    "load_config",
    "settings",
]
