"""Exception types shared across the package.

The CLI maps each family to an exit code (validation 2, numeric 3, I/O 4).
"""


class SetflowError(Exception):
    """Base class for all package errors."""


class ConfigError(SetflowError, ValueError):
    """Invalid parameters, wrong variant, or violated preconditions."""


class ParseError(SetflowError, ValueError):
    """Malformed corpus, grid, or checkpoint file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(SetflowError, ArithmeticError):
    """Non-finite values, divergence, or a failed factorization."""
