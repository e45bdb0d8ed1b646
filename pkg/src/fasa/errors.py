"""Exception hierarchy shared across the package."""


class FasaError(Exception):
    """Base class for all errors raised by fasa."""


class DimensionError(FasaError, ValueError):
    """Operand shapes do not line up."""


class InputError(FasaError, ValueError):
    """Invalid argument or degenerate input."""


class ParseError(FasaError, ValueError):
    """A file on disk is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(FasaError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class GradientError(FasaError, RuntimeError):
    """Misuse of the autodiff tape (double backward, non-scalar loss, ...)."""
