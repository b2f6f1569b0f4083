"""Exception hierarchy shared by all modules."""


class SphereSPDEError(Exception):
    """Base class for package errors."""


class InputError(SphereSPDEError, ValueError):
    """Invalid argument or violated precondition."""


class CapacityError(SphereSPDEError):
    """Requested object would exceed the memory guard."""


class FormatError(SphereSPDEError, ValueError):
    """Malformed input file or geometry."""


class NotSPDError(SphereSPDEError, ValueError):
    """Matrix failed a Cholesky factorization."""


class ConditioningError(SphereSPDEError):
    """Augmented kriging system is singular."""


class DegenerateMetricError(SphereSPDEError, ValueError):
    """Deformation parameters produce a non-positive range."""


class NonConvergenceError(SphereSPDEError):
    """Inner Newton iteration did not reach the gradient tolerance."""


class InferenceError(SphereSPDEError):
    """No valid hyperparameter configuration could be evaluated."""


class InsufficientDataError(SphereSPDEError, ValueError):
    """Too few data pairs for a regression."""
