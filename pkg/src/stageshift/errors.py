"""Exception hierarchy shared by all modules."""


class StageShiftError(Exception):
    """Base class for errors raised by this package."""


class InvalidParameter(StageShiftError, ValueError):
    """A rate, probability or age is outside its admissible range."""


class ConstraintViolation(InvalidParameter):
    """A parameter violates a derived identifiability bound."""

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class NumericalIntegrityError(StageShiftError, ArithmeticError):
    """A computed quantity failed a structural check (e.g. row sums)."""


class TableFormatError(StageShiftError, ValueError):
    """An input table could not be parsed or failed validation."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class NonConvergence(StageShiftError, RuntimeError):
    """Every optimizer start failed; ``best`` carries the best point seen."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
