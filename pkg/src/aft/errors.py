"""Exception types shared across the package."""


class AftError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AftError):
    """Operand shapes are incompatible for the requested operation."""


class BatchSizeError(AftError):
    """Mini-batch is too small for the requested objective."""


class UsageError(AftError):
    """An API was called in a way its contract forbids."""


class StateError(AftError):
    """An object was used before reaching the required state."""


class NonFiniteError(AftError):
    """A NaN or Inf appeared where only finite values are allowed."""


class InputError(AftError):
    """Caller-provided data failed validation."""


class FormatError(AftError):
    """A binary feature or label file is malformed.

    `offset` is the byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(AftError):
    """A dataset manifest is inconsistent or references bad files."""


class ConfigError(AftError):
    """An experiment or training configuration is invalid."""


class AggregationError(AftError):
    """A report aggregation is missing required cells."""


class TrainingAborted(AftError):
    """Training stopped because a loss became non-finite.

    Carries the offending step index so run records can point at it.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
