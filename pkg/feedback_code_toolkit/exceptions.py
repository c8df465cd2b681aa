"""
Exceptions raised by the toolkit.

The command line maps ConfigError (and CheckpointMismatchError) to exit code 2 and
NumericalAbortError to exit code 3.
"""

__all__ = [
    "FeedbackCodeError",
    "DimensionError",
    "ContractError",
    "UninitializedStatisticsError",
    "ConfigError",
    "CheckpointMismatchError",
    "NumericalAbortError",
]


class FeedbackCodeError(Exception):
    """Base class of every error raised by the toolkit."""


class DimensionError(FeedbackCodeError, ValueError):
    """Raised when array shapes do not fit together."""


class ContractError(FeedbackCodeError, ValueError):
    """Raised when a caller breaks the precondition of an operation."""


class UninitializedStatisticsError(FeedbackCodeError, RuntimeError):
    """Raised when normalization statistics are needed before any batch was observed."""


class ConfigError(FeedbackCodeError, ValueError):
    """Raised for invalid, inconsistent or unknown configuration."""


class CheckpointMismatchError(ConfigError):
    """Raised when a checkpoint does not match the model or channel it is used with."""


class NumericalAbortError(FeedbackCodeError, ArithmeticError):
    """Raised when training produces a non-finite value."""
