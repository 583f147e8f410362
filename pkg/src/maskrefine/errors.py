"""Exception types shared across the package."""


class MaskRefineError(Exception):
    """Base class for all package-specific errors."""


class MalformedFile(MaskRefineError):
    """File is not a valid container (bad magic, header, or dtype)."""


class ValueOutOfRange(MaskRefineError):
    """Array contains values outside the documented domain."""


class WrongRank(MaskRefineError):
    """Array does not have the expected number of dimensions."""


class DimensionMismatch(MaskRefineError):
    """Two rasters that must share dimensions do not."""


class EmptyDataset(MaskRefineError):
    """An evaluation was requested over zero images."""


class RefinerUnavailable(MaskRefineError):
    """The refiner backend could not be reached after retries."""


class ProtocolViolation(MaskRefineError):
    """The refiner backend answered outside its wire contract."""


class NoConvergence(MaskRefineError):
    """Iterative solve stopped above tolerance; carries the best iterate."""

    def __init__(self, message, best_plane=None, residual=None, iterations=None):
        super().__init__(message)
        self.best_plane = best_plane
        self.residual = residual
        self.iterations = iterations


class ConfigError(MaskRefineError):
    """A configuration file or plan violates its invariants."""
