"""Exception hierarchy shared by every stage of the lab."""
from typing import Optional


class LabError(Exception):
    """Base class for all lab failures."""


class InvalidInputError(LabError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ConfigError(LabError, ValueError):
    """An experiment configuration failed validation."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}" if field_path else message)


class CheckpointError(LabError, ValueError):
    """A checkpoint or dataset blob could not be decoded or verified."""


class TrainingDivergedError(LabError, RuntimeError):
    """Loss became non-finite during an optimization loop."""

    def __init__(self, stage: str, epoch: int, detail: Optional[str] = None):
        self.stage = stage
        self.epoch = epoch
        message = f"{stage} diverged at epoch {epoch}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
