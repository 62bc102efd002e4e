"""Exception types shared across the package.

The CLI maps these onto process exit codes: data problems exit with 3,
numerical failures with 4.
"""
from __future__ import annotations


class BooleanFlowError(Exception):
    """Base class for all package-specific errors."""


class DataError(BooleanFlowError):
    """Unreadable, malformed, or semantically invalid input data."""


class NumericsError(BooleanFlowError):
    """A numerical routine failed to meet its contract."""


class BracketError(NumericsError):
    """A root bracket does not enclose a sign change."""


class ConvergenceError(NumericsError):
    """An iterative routine hit its iteration cap before converging."""


class QuadratureError(NumericsError):
    """Adaptive quadrature could not reach the requested tolerance.

    Carries the best available estimate and the error actually achieved.
    """

    def __init__(self, message: str, estimate: float | None = None,
                 achieved: float | None = None):
        super().__init__(message)
        self.estimate = estimate
        self.achieved = achieved
