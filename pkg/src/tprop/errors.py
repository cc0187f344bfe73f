"""Exception types shared across the package."""


class TpropError(Exception):
    """Base class for all package errors."""


class DimensionError(TpropError, ValueError):
    """Raised when tensor shapes are inconsistent."""


class ConfigError(TpropError, ValueError):
    """Raised for invalid hyperparameters or configuration values."""


class DataError(TpropError, ValueError):
    """Raised for malformed labels or dataset contents."""


class FormatError(DataError):
    """Raised when a binary file does not match its expected layout."""


class StateError(TpropError, RuntimeError):
    """Raised when an operation needs cached state that is missing or stale."""
