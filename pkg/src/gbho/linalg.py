"""Dense symmetric positive-definite factorization and solves."""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, NotPositiveDefinite

JITTER_START = 1e-10
JITTER_STOP = 1e-4
JITTER_GROWTH = 10.0


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def _check_square_symmetric(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(np.abs(a).max(initial=0.0), np.finfo(float).tiny)
    if np.abs(a - a.T).max(initial=0.0) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")


def cholesky(a, jitter: float = 0.0, escalate: bool = True) -> CholeskyFactor:
    """Factor ``a + jitter*I`` as ``lower @ lower.T``.

    If the factorization fails and ``escalate`` is set, the diagonal shift is
    raised from ``1e-10 * mean(diag(a))`` by factors of 10 until
    ``1e-4 * mean(diag(a))`` before giving up with ``NotPositiveDefinite``.
    The shift actually applied is recorded on the returned factor.
    """
    a = np.asarray(a, dtype=np.float64)
    _check_square_symmetric(a)
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    n = a.shape[0]
    eye = np.eye(n)
    lower, ok = _kernels.cholesky_lower(a + jitter * eye if jitter else a)
    if ok:
        return CholeskyFactor(lower, jitter)
    if escalate and n:
        scale = float(np.mean(np.diag(a)))
        if scale > 0:
            extra = JITTER_START * scale
            while extra <= JITTER_STOP * scale * (1 + 1e-9):
                total = max(jitter, extra)
                lower, ok = _kernels.cholesky_lower(a + total * eye)
                if ok:
                    return CholeskyFactor(lower, total)
                extra *= JITTER_GROWTH
    raise NotPositiveDefinite(f"matrix of size {n} is not positive definite (jitter {jitter:g})")


def solve_spd(factor: CholeskyFactor, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != factor.dim:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, factor has dim {factor.dim}")
    y = _kernels.solve_lower(factor.lower, b)
    return _kernels.solve_lower_t(factor.lower, y)


def log_det(factor: CholeskyFactor) -> float:
    return float(2.0 * np.sum(np.log(np.diag(factor.lower))))
