"""Exception hierarchy shared across the package."""


class RctPermError(Exception):
    """Base class for all package errors."""


class ConfigError(RctPermError, ValueError):
    """Invalid configuration or parameter value."""


class DataError(RctPermError, ValueError):
    """A trial record or input file violates its schema or invariants."""


class UnsupportedError(RctPermError):
    """The requested computation is not defined for this input."""


class NumericError(RctPermError, ArithmeticError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class InsufficientDataError(RctPermError, ValueError):
    """Too few values to compute a statistic."""


class OracleError(RctPermError, AssertionError):
    """An exhaustive check found a residual above tolerance."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or []
