"""Exception types shared across the package.

Each carries a short ``category`` string which the CLI prints as the first
token of its one-line error message.
"""


class BanisError(Exception):
    category = "error"


class ValidationError(BanisError, ValueError):
    """Bad input value or shape. ``field`` names the offending argument."""

    category = "validation"

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class StageError(BanisError, RuntimeError):
    category = "stage"


class CheckpointError(BanisError, RuntimeError):
    category = "checkpoint"


class TrainingDiverged(BanisError, RuntimeError):
    category = "diverged"

    def __init__(self, message, snapshot_path=None):
        self.snapshot_path = snapshot_path
        super().__init__(message)


class DataError(BanisError, OSError):
    """Missing or unreadable dataset file."""

    category = "io"
