"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration value, unknown key, or inconsistent shapes."""


class CapacityError(ValueError):
    """More parts supplied than the slot tensor can hold."""


class DatasetError(Exception):
    """Dataset directory is missing, corrupt, or internally inconsistent."""

    def __init__(self, message: str, object_id: str | None = None):
        super().__init__(message)
        self.object_id = object_id


class CheckpointError(Exception):
    """Checkpoint archive failed validation on save or load."""

    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor


class TrainingDivergedError(Exception):
    """A training loss became non-finite."""
