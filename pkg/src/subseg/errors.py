"""Exception hierarchy shared by all solvers."""


class SubsegError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(SubsegError, ValueError):
    """An argument is outside its documented domain."""


class DegeneracyError(SubsegError):
    """A linear system or basis is rank deficient."""

    def __init__(self, message, rank=None, degree=None):
        super().__init__(message)
        self.rank = rank
        self.degree = degree


class NumericalError(SubsegError, ArithmeticError):
    """Iterates became non-finite or a factorization failed."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DataError(SubsegError):
    """Input data is unreadable or inconsistent."""
