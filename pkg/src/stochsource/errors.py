"""Exception hierarchy shared by all modules."""


class StochSourceError(Exception):
    """Base class for every error raised by the package."""


class InvalidConfigurationError(StochSourceError, ValueError):
    """A parameter or configuration value is outside its admissible range."""


class ShapeError(StochSourceError, ValueError):
    """Field length or grid does not match."""


class InvalidModelError(StochSourceError, ValueError):
    """Operator coefficients violate ellipticity or sign bounds."""


class NumericalFailureError(StochSourceError, ArithmeticError):
    """A linear solve or iteration produced a non-finite result."""


class UnsupportedOracleError(StochSourceError, NotImplementedError):
    """The closed-form oracle only exists for the pure Laplacian on [0, pi]."""


class AliasingError(InvalidConfigurationError):
    """Requested more eigenmodes than the grid can resolve."""


class DegenerateDirectionError(NumericalFailureError):
    """Line search was asked to move along the zero vector."""


class DivergenceError(NumericalFailureError):
    """An optimisation produced a non-finite objective; the trace is attached."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class DependencyError(StochSourceError, FileNotFoundError):
    """A prerequisite artifact (ensemble, stage-1 estimate) is missing."""
