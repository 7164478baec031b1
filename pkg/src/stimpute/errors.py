"""Exception hierarchy shared across the package."""


class StImputeError(Exception):
    """Base class for all package errors."""


class ShapeError(StImputeError, ValueError):
    pass


class ConfigError(StImputeError, ValueError):
    pass


class GeneNotFound(StImputeError, KeyError):
    pass


class EmptyInput(StImputeError, ValueError):
    pass


class InvalidCount(StImputeError, ValueError):
    pass


class EmptyCorpus(StImputeError, ValueError):
    pass


class InvalidFactor(StImputeError, ValueError):
    pass


class EmptyRegion(StImputeError, ValueError):
    """Raised when a region mask selects no positions; callers skip the patch."""


class DegenerateInput(StImputeError, ValueError):
    pass


class NumericalError(StImputeError, ArithmeticError):
    """Non-finite value encountered in a loss or update."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class VersionError(StImputeError):
    pass
