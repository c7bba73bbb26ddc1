"""Exception types shared across the package."""


class NptnError(Exception):
    """Base class for all package errors."""


class ShapeError(NptnError, ValueError):
    """Tensor shapes are not conformable for the requested operation."""


class ContractError(NptnError, ValueError):
    """A documented precondition of an operation was violated."""


class FormatError(NptnError, ValueError):
    """A data or checkpoint file does not match its binary format."""


class ConfigError(NptnError, ValueError):
    """A configuration document is invalid.

    ``key`` names the offending entry (dotted path) when one is known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericAbort(NptnError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
