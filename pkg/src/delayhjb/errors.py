"""Exception types shared across the package.

Every error carries a ``module`` tag so the command line front end can map it
to a machine-readable diagnostic.
"""


class DelayHJBError(Exception):
    module = "core"


class ValidationError(DelayHJBError, ValueError):
    """Inconsistent problem data (dimensions, ordering, non-finite entries)."""

    module = "model"


class DomainError(DelayHJBError, ValueError):
    """An argument lies outside the domain of an operation."""

    module = "operator_core"


class SmoothingUnavailable(DelayHJBError, ArithmeticError):
    """The Gaussian kernel cannot absorb the requested direction.

    Raised when the shifted mean does not lie in the range of the covariance,
    so the two Gaussian measures are mutually singular.
    """

    module = "gaussian"


class UnboundedHamiltonianError(DelayHJBError, ValueError):
    module = "hamiltonian"


class NonContractionError(DelayHJBError, RuntimeError):
    module = "hjb"


class SingularityError(DelayHJBError, ArithmeticError):
    """Gradient requested where the weighted field has no finite limit."""

    module = "hjb"


class SimulationError(DelayHJBError, RuntimeError):
    module = "simulate"
