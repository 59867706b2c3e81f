"""Exception types shared across the package."""


class DCPWAError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DCPWAError):
    """An array argument has the wrong shape for the system at hand."""


class MatchingViolation(DCPWAError):
    """The offset maxima of the two convex parts disagree at some vertex."""


class BadWeights(DCPWAError):
    """Vertex weights are not a valid point of the probability simplex."""


class BadMultiplier(DCPWAError):
    """A certificate multiplier violates its structural constraint."""


class Infeasible(DCPWAError):
    """No strictly feasible certificate was found within the solve budget."""


class NumericalFailure(DCPWAError):
    """The conic solver stalled before reaching its residual targets."""


class NotSymmetric(DCPWAError):
    """A matrix that must be symmetric is not."""


class ParseError(DCPWAError):
    """A text document does not conform to the expected grammar."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
