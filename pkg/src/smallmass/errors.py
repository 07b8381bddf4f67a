"""Exception hierarchy shared by all modules."""


class SmallMassError(Exception):
    """Base class for every error raised by the package."""


class EvaluationError(SmallMassError):
    """A coefficient field produced a non-finite value."""


class DegenerateDragError(SmallMassError):
    """The symmetric part of the drag fell below half the spectral floor."""


class LyapunovError(SmallMassError):
    """The Lyapunov equation has no unique solution."""


class SingularMatrixError(SmallMassError):
    pass


class MatExpRangeError(SmallMassError):
    """Matrix exponential overflowed."""


class GridMismatchError(SmallMassError):
    pass


class FastProcessDivergence(SmallMassError):
    """The auxiliary fast process became non-finite."""

    def __init__(self, message, path_ids=()):
        super().__init__(message)
        self.path_ids = tuple(path_ids)


class WrongSpecializationError(SmallMassError):
    """A fast path was requested for a model lacking the required structure."""


class InsufficientDataError(SmallMassError):
    pass


class ConfigError(SmallMassError):
    """Malformed run configuration."""
