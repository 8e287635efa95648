"""Exception hierarchy shared across the package."""


class TobitcheckError(Exception):
    """Base class for all errors raised by tobitcheck."""


class InputError(TobitcheckError, ValueError):
    """Invalid data, argument, or configuration supplied by the caller."""


class PartitionError(TobitcheckError, ValueError):
    """A support partition cannot be built or does not match the sample."""


class ConvergenceError(TobitcheckError, RuntimeError):
    """An iterative fit failed to reach the convergence tolerance."""


class SingularSystemError(TobitcheckError, RuntimeError):
    """A linear system required by an estimator is (numerically) singular."""


class DegenerateMomentError(TobitcheckError, RuntimeError):
    """All selected moment columns have zero variance; no critical value exists."""


class BandwidthError(TobitcheckError, RuntimeError):
    """Kernel bandwidth leaves an evaluation point with no effective data."""
