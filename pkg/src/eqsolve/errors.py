"""Exception types shared across the package."""


class EqSolveError(Exception):
    """Base class for all package errors."""


class ShapeError(EqSolveError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(EqSolveError, FloatingPointError):
    """A NaN or Inf was produced or consumed.

    ``last_finite`` carries the most recent finite iterate when the error is
    raised from inside a solver, otherwise it is ``None``.
    """

    def __init__(self, message, last_finite=None):
        super().__init__(message)
        self.last_finite = last_finite
