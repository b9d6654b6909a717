"""Exception types shared across the package.

The CLI maps these onto process exit codes: config errors exit 2, data
errors exit 3, numeric failures exit 4.
"""


class ShapeError(ValueError):
    """An operand has an incompatible shape; the message names the axis."""


class ConfigError(ValueError):
    """Invalid configuration (bad value, unknown key, missing field)."""


class DataError(ValueError):
    """Malformed or missing input data (truncated file, bad header, ...)."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required (e.g. NaN loss)."""
