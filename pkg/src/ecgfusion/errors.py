"""Error classes shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class ConfigError(ValueError):
    """Bad configuration: unknown key, invalid value, missing path."""


class DataError(ValueError):
    """Malformed or inconsistent input data or file format."""


class NumericalError(ArithmeticError):
    """Non-finite value where a finite one is required."""
