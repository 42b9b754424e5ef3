"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: I/O problems exit 2,
schema/validation problems exit 3, numerical failures exit 4.
"""


class GgpfrError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(GgpfrError):
    """A CSV or config file does not match the declared schema."""


class ValidationError(GgpfrError):
    """Data violates an invariant (family range, shapes, ordering)."""


class ModelFormatError(GgpfrError):
    """A model file is malformed, truncated, or has the wrong version."""


class NumericalError(GgpfrError):
    """Base class for numerical failures."""


class ConditioningError(NumericalError):
    """A covariance matrix stayed indefinite after jitter escalation."""


class ConvergenceError(NumericalError):
    """An iterative solver did not converge within its iteration budget."""

    def __init__(self, message, last_residual=None):
        super().__init__(message)
        self.last_residual = last_residual
