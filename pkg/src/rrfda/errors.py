"""Exception types shared across the package."""


class RRFDAError(Exception):
    """Base class for package errors."""


class ConfigurationError(RRFDAError, ValueError):
    """Invalid configuration or input that fails validation."""


class InputError(RRFDAError, ValueError):
    """Rejected input data (non-finite samples, missing files, ...)."""


class DegenerateSegmentError(RRFDAError, ValueError):
    """A segment has an all-zero spectrum, so it cannot be normalized."""


class StructuralError(RRFDAError, ValueError):
    """Dimension mismatch or invalid model state."""


class NumericalError(RRFDAError, RuntimeError):
    """Numerical failure that survived the jitter retry."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class MissingDrawsError(RRFDAError, LookupError):
    """The archive lacks draws needed for a requested functional."""
