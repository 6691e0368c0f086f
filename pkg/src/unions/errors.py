"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class UnionsError(Exception):
    """Base class for all package errors."""


class ValidationError(UnionsError):
    """Bad configuration, arguments, or contract misuse."""


class ConfigError(ValidationError):
    """Invalid field in a config object."""


class LengthError(ValidationError):
    """Sequence exceeds the model's maximum length."""


class SpecError(ValidationError):
    """Inconsistent language/corpus specification."""


class DataError(UnionsError):
    """Corrupt or mismatched on-disk data."""


class CheckpointError(DataError):
    """Unreadable or malformed checkpoint file."""


class FingerprintError(DataError):
    """Checkpoint was trained on a different corpus than the one supplied."""


class NumericalError(UnionsError):
    """NaN propagation or other numerical failure."""
