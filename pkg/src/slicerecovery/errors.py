"""Exception hierarchy shared across the package."""


class SliceRecoveryError(Exception):
    """Base class for all package errors."""


class DimensionError(SliceRecoveryError, ValueError):
    """Array shapes are incompatible with an operation."""


class ParameterError(SliceRecoveryError, ValueError):
    """A numeric or configuration parameter is out of range."""


class NumericError(SliceRecoveryError, ArithmeticError):
    """Non-finite values were encountered where finite ones are required."""


class UsageError(SliceRecoveryError, RuntimeError):
    """An API was called in a way its contract does not allow."""


class DomainError(SliceRecoveryError, ValueError):
    """Input lies outside the domain of a mapping."""


class GenerationError(SliceRecoveryError, RuntimeError):
    pass


class StatisticsError(SliceRecoveryError, ValueError):
    pass


class LossError(SliceRecoveryError, ValueError):
    pass


class DataError(SliceRecoveryError, RuntimeError):
    """No usable training sample could be drawn."""


class TrainingError(SliceRecoveryError, RuntimeError):
    pass


class RecoveryError(SliceRecoveryError, ValueError):
    pass


class DictionaryError(SliceRecoveryError, KeyError):
    pass


class MetricError(SliceRecoveryError, ValueError):
    pass


class PartitionError(SliceRecoveryError, ValueError):
    pass


class FormatError(SliceRecoveryError, ValueError):
    """A file does not follow the expected binary layout."""


class ConfigError(SliceRecoveryError, ValueError):
    """A run configuration failed schema validation."""


class CheckpointMismatchError(SliceRecoveryError, ValueError):
    """A checkpoint is incompatible with the requested configuration or data."""
