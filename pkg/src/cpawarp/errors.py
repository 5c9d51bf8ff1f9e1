"""Exception hierarchy shared by all modules."""


class CpaWarpError(Exception):
    """Base class for every error raised by the package."""


class UsageError(CpaWarpError, ValueError):
    """Invalid argument or configuration."""


class NumericalError(CpaWarpError, ArithmeticError):
    """A numerical procedure failed or produced non-finite values."""


class InvalidDomain(UsageError):
    pass


class InvalidCellCount(UsageError):
    pass


class OutOfDomain(UsageError):
    pass


class DimensionMismatch(UsageError):
    pass


class ShapeMismatch(UsageError):
    pass


class UnsupportedCombination(UsageError):
    pass


class BijectorBasisError(UsageError):
    pass


class OutOfRange(UsageError):
    pass


class EmptyClass(UsageError):
    pass


class InsufficientData(UsageError):
    pass


class RecordMismatch(UsageError):
    """A traversal record was produced for different parameters."""


class RankDeficiency(NumericalError):
    pass


class NonPositiveDefinite(NumericalError):
    pass


class IterationOverflow(NumericalError):
    pass


class DegenerateDenominator(NumericalError):
    pass


class RangeEscape(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class ParseError(UsageError):
    """Malformed input file; message carries the location."""


class IoError(CpaWarpError, OSError):
    """File could not be read or written; message carries the path."""
