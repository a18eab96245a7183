"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class PolypsynthError(Exception):
    """Base class for all package errors."""


class ShapeError(PolypsynthError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(PolypsynthError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(PolypsynthError, ValueError):
    """Dataset or file-level problem (missing mask, extent mismatch, ...)."""


class NumericError(PolypsynthError, ArithmeticError):
    """Non-finite values encountered where the math requires finite ones."""
