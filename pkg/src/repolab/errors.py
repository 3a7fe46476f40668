"""Exception hierarchy shared by every module."""


class RepoLabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RepoLabError, ValueError):
    """An argument violates an operation's precondition."""


class NumericError(RepoLabError, ArithmeticError):
    """Non-finite values were found where finite values are required."""


class ParseError(RepoLabError, ValueError):
    """A persisted file could not be parsed.

    ``line`` is the 1-based line number of the offending record, when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateFitError(RepoLabError, ValueError):
    """A least-squares design matrix is rank deficient."""


class ConfigError(RepoLabError, ValueError):
    """A run configuration is inconsistent or incomplete."""
