class SagcrfError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(SagcrfError, ValueError):
    """An argument violates a documented precondition (shape, range, emptiness)."""


class RefusalError(SagcrfError, ValueError):
    """The request is valid but too large to service (e.g. brute-force enumeration)."""


class TabularFormatError(SagcrfError, ValueError):
    """A tabular data file could not be parsed."""


class NonFiniteError(SagcrfError, FloatingPointError):
    """The objective or a line search produced a non-finite value."""


class TuningError(SagcrfError, RuntimeError):
    """Every step size in a tuning grid diverged."""


class ConvergenceError(SagcrfError, RuntimeError):
    """An optimizer could not reach its required tolerance within its budget."""
