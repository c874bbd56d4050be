"""Exceptions for kpldf."""
import math


class KpldfException(Exception):
    """Common base class for all kpldf exceptions."""

    def __init__(self, *args, **kwargs):
        """Initialize the exception."""
        super().__init__(*args, **kwargs)
        if len(args) >= 3:
            self.errno = args[0]
            self.strerror = "%s: %s" % (args[1], args[2])
        elif len(args) == 2:
            self.errno = args[0]
            self.strerror = str(args[1])
        elif len(args) == 1:
            self.errno = None
            self.strerror = str(args[0])
        else:
            self.errno = None
            self.strerror = ""

    def __str__(self):
        """Return the error message."""
        if self.errno is not None:
            return "[Errno %s] %s" % (self.errno, self.strerror)
        return self.strerror


class DataException(KpldfException):
    """Common base class for all data and file exceptions."""


class FormatError(DataException):
    """Malformed dataset or instance record."""


class InvariantError(DataException):
    """Instance invariant violated."""


class InfeasibleLabelError(InvariantError):
    """Label exceeds the instance capacity."""


class CheckpointError(DataException):
    """Corrupt or incompatible model checkpoint."""


class StorageError(DataException):
    """Read or write failure."""


class ComputeException(KpldfException):
    """Common base class for all numerical exceptions."""


class ShapeError(ComputeException):
    """Tensor shape mismatch."""


class SolverLimitError(ComputeException):
    """Branch-and-bound node limit exceeded."""


class InstanceTooLargeError(ComputeException):
    """Instance too large for exhaustive enumeration."""


class NonFiniteLossError(ComputeException):
    """Training loss is not finite."""


class ConfigError(ComputeException):
    """Invalid training configuration."""


class MissingMetricError(ComputeException):
    """Metric not present in the epoch log."""


class DomainError(ComputeException):
    """Argument outside the domain of a metric."""


class UnknownError(KpldfException):
    """Unknown error."""


KPLDF_EXCEPTIONS = {
    # Data errors are raised while reading, writing or validating artifacts.
    -1: (FormatError, "Malformed record"),
    -2: (InvariantError, "Invariant violated"),
    -3: (InfeasibleLabelError, "infeasible label"),
    -4: (CheckpointError, "Corrupt checkpoint"),
    -5: (StorageError, "I/O failure"),
    # Compute errors are raised by the solver, the engine and the trainers.
    -100: (ShapeError, "Shape mismatch"),
    -101: (SolverLimitError, "Node limit exceeded"),
    -102: (InstanceTooLargeError, "Instance too large for enumeration"),
    -103: (NonFiniteLossError, "Non-finite loss"),
    -104: (ConfigError, "Invalid configuration"),
    -105: (MissingMetricError, "Missing metric"),
    -106: (DomainError, "Argument out of domain"),
}


def exception(error_code, detail=None):
    """Return exception corresponding to an error code."""
    try:
        exc, msg = KPLDF_EXCEPTIONS[error_code]
    except KeyError:
        return UnknownError(error_code, "Unknown error")
    if detail is None:
        return exc(error_code, msg)
    return exc(error_code, msg, detail)


def check_finite(value, error_code, detail=None):
    """Raise exception if a value is NaN or infinite."""
    if not math.isfinite(value):
        raise exception(error_code, detail)
