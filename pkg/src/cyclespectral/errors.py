"""Exception hierarchy shared across the package."""


class CycleSpectralError(Exception):
    """Base class for all package errors."""


class ContractViolation(CycleSpectralError, ValueError):
    """Raised when inputs break an operation's preconditions (shapes, tags)."""


class ConfigError(CycleSpectralError):
    """Invalid configuration value or unknown spectrum tag."""

    def __init__(self, message, key=None):
        self.key = key
        self.message = message
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class IngestionError(CycleSpectralError):
    """A dataset manifest entry or file could not be loaded."""

    def __init__(self, message, entry=None):
        self.entry = entry
        if entry is not None:
            message = f"{entry}: {message}"
        super().__init__(message)


class TrainingDivergence(CycleSpectralError, RuntimeError):
    """Non-finite loss during training.  ``snapshot`` holds diagnostics."""

    def __init__(self, message, snapshot=None):
        self.snapshot = snapshot or {}
        super().__init__(message)
