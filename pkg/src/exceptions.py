"""Exception hierarchy shared by every module.

Errors that should terminate the command line carry the process exit code
the CLI reports for them.
"""


class InsertError(Exception):
    """Base class for errors surfaced to the command line."""

    exit_code = 1


class ConfigError(InsertError):
    exit_code = 2


class UnknownEntityError(InsertError):
    """Unknown users or items on the command line; `offenders` lists them."""

    exit_code = 2

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class DataError(InsertError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyDatasetError(DataError):
    pass


class NumericError(InsertError):
    """Non-finite values during optimisation; `parameter` names the culprit."""

    exit_code = 4

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class ArtifactMismatchError(InsertError):
    exit_code = 5


# --- library-level misuse (not mapped to dedicated exit codes) ---

class DimensionError(ValueError):
    pass


class ArgumentError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class EmptyReportError(ValueError):
    pass


class UnknownUserError(KeyError):
    pass
