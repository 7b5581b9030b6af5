"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``GBHO_DISABLE_NUMBA`` is unset or ``0``. Both implementations stay
importable so tests and the benchmark can compare them directly.
"""

import logging
import os

import numpy as np

from . import numpy_impl

logger = logging.getLogger(__name__)

RELU = numpy_impl.RELU
TANH = numpy_impl.TANH


def _numba_requested():
    return os.environ.get("GBHO_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


_numba = None
if _numba_requested():
    try:
        import importlib

        _numba = importlib.import_module(".numba_impl", __name__)
    except ImportError:  # pragma: no cover - numba is a declared dependency
        logger.warning("numba unavailable, falling back to numpy kernels")

USE_NUMBA = _numba is not None
_impl = _numba if USE_NUMBA else numpy_impl


def backend():
    return "numba" if USE_NUMBA else "numpy"


def cholesky_lower(a):
    return _impl.cholesky_lower(np.ascontiguousarray(a, dtype=np.float64))


def _as_columns(lower, b, kernel):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        return kernel(lower, np.ascontiguousarray(b[:, None]))[:, 0]
    return kernel(lower, np.ascontiguousarray(b))


def solve_lower(lower, b):
    return _as_columns(lower, b, _impl.solve_lower)


def solve_lower_t(lower, b):
    return _as_columns(lower, b, _impl.solve_lower_t)


def rbf_cross(a, b, length_scales):
    return _impl.rbf_cross(
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
        np.ascontiguousarray(length_scales, dtype=np.float64),
    )


def softmax_loss_grad(beta, x, y, d, k):
    return _impl.softmax_loss_grad(beta, x, y, d, k)


def mlp_loss_grad(beta, x, y, d, h, k, act):
    return _impl.mlp_loss_grad(beta, x, y, d, h, k, act)


def sgd_epoch_softmax(beta, vel, x, y, perm, batch, lr, momentum, coef, d, k):
    _impl.sgd_epoch_softmax(beta, vel, x, y, perm, batch, lr, momentum, coef, d, k)


def sgd_epoch_mlp(beta, vel, x, y, perm, batch, lr, momentum, coef, d, h, k, act):
    _impl.sgd_epoch_mlp(beta, vel, x, y, perm, batch, lr, momentum, coef, d, h, k, act)
