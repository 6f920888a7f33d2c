from config.settings import EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO


class CompressionError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = EXIT_USAGE


class UsageError(CompressionError, ValueError):
    """Inconsistent flags or arguments outside an operation's contract."""
    exit_code = EXIT_USAGE


class InfeasibleBudgetError(CompressionError, ValueError):
    """No assignment of levels fits under the budget."""
    exit_code = EXIT_USAGE


class NumericalError(CompressionError, ArithmeticError):
    """
    A factorization or elimination broke down.

    Attributes:
        pivot (int): Index of the failing pivot, or None when unknown
    """
    exit_code = EXIT_NUMERICAL

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class TensorFormatError(CompressionError, ValueError):
    """A tensor or metadata file does not follow the on-disk contract."""
    exit_code = EXIT_IO
