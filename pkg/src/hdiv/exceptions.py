"""Exception and warning types shared across the package."""


class HdivError(Exception):
    """Base class for all errors raised by hdiv."""


class InputError(HdivError, ValueError):
    """Malformed data: wrong shapes, non-finite values, bad CSV cells."""


class ConfigurationError(HdivError, ValueError):
    """Invalid tuning or simulation parameters."""


class WeakIdentificationError(HdivError):
    """The instrument carries (numerically) no information about ``d``.

    Wald inference is refused in this case; the score statistic and its
    inverted confidence set remain available.
    """


class DegenerateStatisticError(HdivError):
    """The score statistic has a zero denominator."""


class ConvergenceWarning(UserWarning):
    """Coordinate descent hit its sweep cap before converging."""
