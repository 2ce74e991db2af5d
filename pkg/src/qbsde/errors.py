"""Exception hierarchy shared by every solver module.

The CLI maps :class:`ValidationError` to exit status 2 and
:class:`NumericalError` to exit status 3.
"""


class QBSDEError(Exception):
    """Base class for all package errors."""


class ValidationError(QBSDEError, ValueError):
    """Bad input: wrong shapes, non-finite values, violated preconditions."""


class NumericalError(QBSDEError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class RankDeficientError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class BracketError(NumericalError):
    """A bounded search found its optimum on the search-box boundary."""


class SubgradientCertificateError(NumericalError):
    """A selected subgradient failed the subgradient inequality."""


class InfiniteValueError(NumericalError):
    """An extended-real value was +inf where a finite number was required."""


class InadmissibleControlError(NumericalError):
    pass


class WeightDegeneracyError(NumericalError):
    """Importance weights collapsed onto too few paths."""
