"""Exception hierarchy for the marketplace."""


class MarketError(Exception):
    """Base class for every error raised by this package."""


class InvalidPattern(MarketError, ValueError):
    pass


class InvalidBudget(MarketError, ValueError):
    pass


class InvalidGroupCount(MarketError, ValueError):
    pass


class OwnerExhausted(MarketError):
    """Some owner has no remaining tolerable privacy loss; the market closes."""


class VarianceUnachievable(MarketError, ValueError):
    pass


class NonInvertibleUtility(MarketError, ArithmeticError):
    """The patterned utility is not monotone, so no inverse exists."""


class PatternInfeasible(MarketError):
    """The pattern search did not converge.

    ``best`` holds the best pattern verified feasible on the full grid
    (the all-ones pattern when nothing better was found).
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class LedgerUnderflow(MarketError, RuntimeError):
    """A debit exceeded an owner's remaining loss. Indicates a bug upstream."""


class InputError(MarketError):
    """Malformed input file. ``path`` and ``line`` locate the problem."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line
