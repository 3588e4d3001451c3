"""Exception types raised across the package."""


class SlideCompressError(Exception):
    """Base class for all package errors."""


class FormatError(SlideCompressError):
    """A file on disk does not follow the expected layout."""


class ShapeError(SlideCompressError):
    """Array shapes disagree."""


class ValidationError(SlideCompressError):
    """A value violates a documented invariant."""


class CapacityError(SlideCompressError):
    """A sequence does not fit in the requested packed length."""


class ConfigError(SlideCompressError):
    """Invalid configuration value."""


class DegenerateVarianceError(SlideCompressError):
    """Total variance of a slide is zero, so normalized errors are undefined."""


class EmptyNeighborhoodError(SlideCompressError):
    pass


class ZeroMassError(SlideCompressError):
    """No token has positive similarity to the text embedding."""


class GridError(SlideCompressError):
    """Curves being aggregated do not share an abscissa."""


class EmptyRowError(SlideCompressError):
    """An attention row has no valid entry to keep."""


class NumericalError(SlideCompressError):
    pass


class DegenerateLatentError(SlideCompressError):
    pass


class TrainingError(SlideCompressError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
