"""Exception types shared across the package."""


class ChurnpoolError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(ChurnpoolError, ValueError):
    """Raised when inputs violate a documented precondition."""


class DataError(ChurnpoolError, ValueError):
    """Raised when a data file is malformed or inconsistent."""


class ConvergenceError(ChurnpoolError, RuntimeError):
    """Raised when an iterative solver fails to meet its tolerance."""


class DiagnosticError(ChurnpoolError, RuntimeError):
    """Raised when sampler diagnostics indicate an unusable run."""


class NotFittedError(ChurnpoolError, RuntimeError):
    """Raised when an estimator is used before ``fit``."""
