"""Exception hierarchy shared by every module.

Each class carries the process exit code the command-line entry point uses
when the error escapes a command.
"""


class MDPError(Exception):
    exit_code = 1


class ConfigError(MDPError, ValueError):
    exit_code = 1


class UsageError(MDPError, RuntimeError):
    exit_code = 1


class DataError(MDPError, ValueError):
    exit_code = 2


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(MDPError, ValueError):
    exit_code = 3


class NumericalError(MDPError, ArithmeticError):
    exit_code = 3


class DegenerateEmbeddingError(NumericalError):
    pass
