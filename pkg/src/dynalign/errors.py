"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and NumericError to exit code 3;
everything else is an ordinary failure.
"""


class ConfigError(ValueError):
    """Invalid configuration value. Carries the offending field path."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InputError(ValueError):
    """Input data violates an operation's preconditions."""


class NumericError(RuntimeError):
    """A computation produced or encountered non-finite values."""


class FormatError(ValueError):
    """A file does not match the expected binary format."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
