"""Exception hierarchy. The CLI maps each family onto a process exit code."""


class FlipsegError(Exception):
    exit_code = 1


class ConfigError(FlipsegError, ValueError):
    exit_code = 2


class DataError(FlipsegError, ValueError):
    exit_code = 3


class BoundsError(DataError):
    pass


class FormatError(DataError):
    """Malformed or truncated file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(FlipsegError, ArithmeticError):
    exit_code = 4


class StateError(FlipsegError, RuntimeError):
    """Operation invoked on an object in the wrong lifecycle state."""
