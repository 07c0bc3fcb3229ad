"""Exception hierarchy shared across the package."""


class ZeroCredError(Exception):
    """Base class for all package errors."""


class DomainError(ZeroCredError, ValueError):
    """A distribution or model parameter lies outside its domain."""


class UsageError(ZeroCredError, ValueError):
    """An operation was called with arguments that violate its contract."""


class NumericError(ZeroCredError, ArithmeticError):
    """A computation failed numerically (underflow of all weights, non-finite values)."""


class DiagnosticError(ZeroCredError, RuntimeError):
    """An iterative procedure failed to converge or a sampler got stuck.

    ``last`` carries the last iterate or partial state when available.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class DataError(ZeroCredError, ValueError):
    """Input data does not match the expected schema.

    ``row`` and ``column`` locate the offending cell when known.
    """

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column
