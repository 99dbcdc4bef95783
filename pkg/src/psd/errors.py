"""Exception hierarchy shared by every module."""


class PSDError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PSDError, ValueError):
    """Array dimensions do not agree."""


class DegenerateColumnError(PSDError, ValueError):
    """A dictionary column has zero norm and cannot be rescaled."""


class PreconditionError(PSDError, ValueError):
    """An input violates a documented precondition."""


class InputError(PSDError, ValueError):
    """Empty, misaligned or otherwise unusable input data."""


class FormatError(PSDError, ValueError):
    """A binary file (PSD1, TNSR, PGM) is malformed or truncated."""


class NumericalError(PSDError, ArithmeticError):
    """A loss or gradient became non-finite."""
