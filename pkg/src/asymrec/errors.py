"""Exception hierarchy shared across the package."""


class AsymRecError(Exception):
    exit_code = 1


class UsageError(AsymRecError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class DimensionError(UsageError, ValueError):
    pass


class FormatError(AsymRecError):
    """Malformed binary or text input. ``offset`` is a byte offset when known."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IngestionError(FormatError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(AsymRecError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    pass
