"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so new failure modes should subclass one
of the four roots below rather than raising bare built-ins.
"""


class DarseError(Exception):
    """Base class for all library errors."""


class InvalidInputError(DarseError, ValueError):
    """Malformed argument: bad shape, non-finite value, length mismatch."""


class InvalidRankError(InvalidInputError):
    """A rank outside ``[0, min(rows, cols)]``."""


class DegenerateInputError(DarseError, ValueError):
    """Input is well-formed but admits no meaningful answer."""


class InfeasibleBudgetError(DegenerateInputError):
    """No candidate satisfies the parameter budget."""

    def __init__(self, message, minimal_weight=None):
        super().__init__(message)
        self.minimal_weight = minimal_weight


class CapExceededError(InvalidInputError):
    """An enumeration would exceed its configured size cap."""

    def __init__(self, message, size):
        super().__init__(message)
        self.size = size


class NumericFailureError(DarseError, ArithmeticError):
    """Iteration failed to converge or produced non-finite values."""


class EvaluatorError(DarseError, RuntimeError):
    """An objective evaluator raised while scoring a rank vector."""

    def __init__(self, message, rank_vector):
        super().__init__(message)
        self.rank_vector = tuple(rank_vector)
