"""Exception hierarchy shared across the package."""


class MoeGrowError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MoeGrowError):
    """Tensor shapes are incompatible with the requested operation."""


class ArgumentError(MoeGrowError):
    """An argument is outside its documented domain."""


class NumericsError(MoeGrowError):
    """An operation produced non-finite values."""


class TrainingError(MoeGrowError):
    """Training aborted; carries the step index and a diagnostic checkpoint."""

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class ReducibleChainError(MoeGrowError):
    """The configured Markov chain is not irreducible."""


class DataError(MoeGrowError):
    """A token stream is too short or otherwise unusable."""


class FormatError(MoeGrowError):
    """A checkpoint file does not follow the expected layout."""


class CorruptionError(MoeGrowError):
    """A checkpoint file is internally inconsistent."""


class UnsupportedError(MoeGrowError):
    """A checkpoint file uses a feature this build does not support."""
