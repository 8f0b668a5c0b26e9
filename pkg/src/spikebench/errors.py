"""Exception hierarchy shared by every module."""


class SpikebenchError(Exception):
    """Base class for all package errors."""


class ContractError(SpikebenchError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ModelError(SpikebenchError, ValueError):
    """A model description is internally inconsistent."""


class LoadError(SpikebenchError):
    """A file could not be parsed into a valid artifact."""


class NumericalError(SpikebenchError, ArithmeticError):
    """A numerical routine failed (singular system, non-finite values)."""


class LayerError(SpikebenchError):
    """Failure inside one layer of a forward pass; carries the layer index."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"layer {index}: {cause}")
        self.index = index
        self.cause = cause
