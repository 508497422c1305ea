"""Exception types shared across the package."""

__all__ = [
    "BayesromError",
    "DimensionError",
    "DataFormatError",
    "DegenerateScaleError",
    "RankDeficientError",
    "NotSPDError",
    "ConvergenceError",
    "StabilityError",
    "FomBlowupError",
]


class BayesromError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(BayesromError, ValueError):
    """Array shapes are inconsistent with each other or with the model."""


class DataFormatError(BayesromError, ValueError):
    """A file or container does not match the documented format."""


class DegenerateScaleError(BayesromError, ValueError):
    """A variable has no spread (max = min), so it cannot be scaled."""


class RankDeficientError(BayesromError, ValueError):
    """The data matrix is rank deficient where full column rank is required."""


class NotSPDError(BayesromError, ValueError):
    """A matrix required to be symmetric positive definite is not, even
    after the jitter policy has been exhausted."""


class ConvergenceError(BayesromError, RuntimeError):
    """An iterative procedure failed to reach its tolerance."""


class StabilityError(BayesromError, RuntimeError):
    """No stable candidate/sample exists where at least one is required."""


class FomBlowupError(BayesromError, RuntimeError):
    """The full-order solve produced a non-finite or unphysical state."""

    def __init__(self, message, blowup_time=None):
        super().__init__(message)
        self.blowup_time = blowup_time
