"""Exception types raised across the package."""


class BQOError(Exception):
    """Base class for package errors."""


class ConfigurationError(BQOError, ValueError):
    """Inconsistent dimensions, unknown tags or invalid settings."""


class UnsupportedOperationError(BQOError):
    """Operation not defined for the chosen kernel family or measure."""


class IllConditionedError(BQOError):
    """Cholesky factorization failed even at the largest jitter."""

    def __init__(self, message, jitter=None, min_diag=None, cond=None):
        super().__init__(message)
        self.jitter = jitter
        self.min_diag = min_diag
        self.cond = cond


class NumericalConsistencyError(BQOError):
    """A quantity that must be non-negative came out clearly negative."""


class SamplerStuckError(BQOError):
    """Slice sampler exhausted its shrinkage budget."""


class OptimizationFailure(BQOError):
    """No optimizer start produced a finite result."""


class SimulatorFailure(BQOError):
    """The objective simulator raised or returned a non-finite value."""


class InvalidMarginalError(ConfigurationError):
    """An inverse CDF failed the monotonicity spot check."""
