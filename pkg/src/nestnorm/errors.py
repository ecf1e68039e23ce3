"""Exception hierarchy.

Every error raised on purpose by the library derives from
:class:`NestNormError`. The CLI maps each subclass to its own exit code.
"""


class NestNormError(Exception):
    """Base class for library errors."""

    exit_code = 9


class InvalidInputError(NestNormError, ValueError):
    """Malformed arguments: empty signals, bad orders, non-finite samples."""

    exit_code = 4


class ShapeMismatchError(InvalidInputError):
    """Kernel grid and signal grid are incompatible."""

    exit_code = 4


class DegenerateSignalError(NestNormError, ValueError):
    """The signal sits on a critical point (e.g. zero variance, too few distinct values).

    Perturb it first (see :mod:`nestnorm.perturb`).
    """

    exit_code = 5


class RankDeficiencyError(DegenerateSignalError):
    """Feature gradients are linearly dependent at the current point."""

    exit_code = 5


class UnreachableValueError(NestNormError, ValueError):
    """A requested feature value lies outside the range reachable along the flow."""

    exit_code = 6

    def __init__(self, message, feature_index=None):
        super().__init__(message)
        self.feature_index = feature_index


class IntegrationError(NestNormError, RuntimeError):
    """Numeric flow integration stalled or exhausted its step budget."""

    exit_code = 7


class ConvergenceError(NestNormError, RuntimeError):
    """An iterative solver (Newton, bisection) failed to converge or bracket."""

    exit_code = 8
