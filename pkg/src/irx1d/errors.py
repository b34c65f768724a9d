"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ArgumentError(ValueError):
    """An argument violates a documented precondition."""


class DataError(ValueError):
    """Input data violates a contract (e.g. a class with too few pixels)."""


class FormatError(ValueError):
    """A file does not conform to its documented format.

    ``reason`` distinguishes failure modes ("magic", "version", "truncated",
    "size", "header") so callers can react without parsing messages.
    """

    def __init__(self, message, reason="format"):
        super().__init__(message)
        self.reason = reason


class NumericError(ArithmeticError):
    """A non-finite value appeared where the pipeline requires finite numbers."""


class GraphStateError(RuntimeError):
    """An autodiff call arrived in the wrong order (e.g. backward before forward)."""
