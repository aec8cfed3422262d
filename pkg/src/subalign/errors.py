"""Exception types shared across the package."""


class FormatError(ValueError):
    """Malformed or corrupted binary artifact (bad magic, truncation, NaNs)."""


class NumericalError(ArithmeticError):
    """Numerical failure: divergent loss, no stable subspace dimension, etc."""


class NoStableDimension(NumericalError):
    """No subspace dimension satisfies the eigenvalue-gap stability rule.

    Carries the evaluated bound curve so callers can report or plot it.
    """

    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve
