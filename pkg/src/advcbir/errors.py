"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific one that applies.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad field values, inconsistent combinations."""


class DataError(ValueError):
    """Broken or missing input data: unreadable files, malformed ground truth."""


class NumericError(ArithmeticError):
    """Numeric failure during computation (non-finite loss, degenerate input)."""
