"""Error types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, NumericError -> 4.
"""


class AmygsegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AmygsegError):
    """Invalid configuration value or malformed config file."""


class DataError(AmygsegError):
    """Unreadable, malformed, or inconsistent on-disk data."""


class ShapeError(DataError):
    """Operands have incompatible shapes; message names both shapes."""


class NumericError(AmygsegError):
    """Non-finite values or other numeric failure during computation."""
