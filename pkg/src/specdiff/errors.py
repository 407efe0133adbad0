"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific one that applies rather than bare ValueError/RuntimeError.
"""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ValueError):
    """A run configuration failed to parse or validate."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""


class CalibrationError(RuntimeError):
    """Data-driven calibration could not produce a usable result."""


class FileFormatError(Exception):
    """An on-disk artifact is malformed or has an unsupported version."""
