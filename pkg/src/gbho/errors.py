"""Exception types shared across the package."""

import numpy as np


class DimensionMismatch(ValueError):
    pass


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class OutOfBounds(ValueError):
    pass


class Diverged(FloatingPointError):
    """A training or inner solve produced a non-finite objective."""


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class BudgetExceeded(ValueError):
    pass
