"""Exception hierarchy. The CLI maps these to process exit codes."""


class HashMoeError(Exception):
    """Base class for all engine errors."""


class ConfigError(HashMoeError, ValueError):
    """Inconsistent configuration or dimension mismatch (exit code 2)."""


class DataError(HashMoeError, ValueError):
    """Bad or missing input data (exit code 3)."""


class InputDomainError(DataError):
    """A point lies outside the domain an operation accepts."""


class ContractError(HashMoeError, RuntimeError):
    """A backward pass was handed a cache that does not belong to it."""


class DivergenceError(HashMoeError, FloatingPointError):
    """Non-finite values appeared during training (exit code 4)."""

    def __init__(self, message: str, step: int | None = None, details: dict | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
        self.details = details or {}


class CheckpointError(ConfigError):
    """Checkpoint blob missing, misshapen, or from an incompatible version."""

    def __init__(self, message: str, blob: str | None = None):
        if blob is not None:
            message = f"{blob}: {message}"
        super().__init__(message)
        self.blob = blob
