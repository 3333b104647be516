"""Exception hierarchy shared by all modules."""


class NeuVecError(Exception):
    """Base class for package errors."""


class NotPositiveDefinite(NeuVecError):
    pass


class DimensionMismatch(NeuVecError, ValueError):
    pass


class ShapeMismatch(NeuVecError, ValueError):
    pass


class UnknownFamily(NeuVecError, ValueError):
    pass


class UnsupportedDimension(NeuVecError, ValueError):
    pass


class EmptyInput(NeuVecError, ValueError):
    pass


class ZeroDistance(NeuVecError, ValueError):
    pass


class MeanNetAbsent(NeuVecError):
    pass


class IterOutOfRange(NeuVecError, ValueError):
    pass


class NonFiniteLoss(NeuVecError, ArithmeticError):
    """Raised when a loss evaluates to NaN/inf; ``iteration`` records where."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class FitError(NeuVecError, ValueError):
    pass


class MissingColumn(NeuVecError, KeyError):
    pass


class ParseError(NeuVecError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyDataset(NeuVecError, ValueError):
    pass


class InsufficientNeighbors(NeuVecError):
    pass


class CheckpointError(NeuVecError):
    """Bad magic, truncated file, or format-version mismatch."""


class ConfigError(NeuVecError, ValueError):
    pass
