"""Exception hierarchy shared across the package."""


class EBMError(Exception):
    """Base class for all library errors."""


class CapExceeded(EBMError):
    """An output space is too large to enumerate under the requested cap."""


class DimensionMismatch(EBMError, ValueError):
    pass


class ShapeMismatch(EBMError, ValueError):
    pass


class UnknownExampleId(EBMError, IndexError):
    pass


class TapeMismatch(EBMError):
    """A tape was replayed against a different network or parameter vector."""


class WrongKind(EBMError, TypeError):
    pass


class NotNSD(EBMError, ValueError):
    """Pairwise interaction matrix is not symmetric negative semidefinite."""


class SolverFailure(EBMError):
    pass


class ParseError(EBMError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LabelOutOfRange(ParseError):
    pass


class NotAPermutation(ParseError):
    pass


class NotUnary(EBMError, TypeError):
    """Operation needs a unary model (bilinear coupling on binary vectors)."""


class ConfigError(EBMError, ValueError):
    pass


class DivergenceError(EBMError, FloatingPointError):
    """Training produced non-finite parameters or losses."""
