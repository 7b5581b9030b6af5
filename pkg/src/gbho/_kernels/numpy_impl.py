"""Pure-numpy reference kernels.

Every function here has a twin in ``numba_impl`` with an identical signature
and identical floating-point semantics up to summation order.
"""

import numpy as np
from scipy.linalg import solve_triangular

RELU = 0
TANH = 1


def cholesky_lower(a):
    """Return ``(lower, ok)``; ``ok`` is False when ``a`` is not positive definite."""
    try:
        return np.linalg.cholesky(a), True
    except np.linalg.LinAlgError:
        return np.zeros_like(a), False


def solve_lower(lower, b):
    return solve_triangular(lower, b, lower=True, check_finite=False)


def solve_lower_t(lower, b):
    """Solve ``lower.T @ x = b``."""
    return solve_triangular(lower, b, lower=True, trans="T", check_finite=False)


def rbf_cross(a, b, length_scales):
    diff = (a[:, None, :] - b[None, :, :]) / length_scales
    return np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def _log_softmax_terms(logits, y):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(len(y)), y].mean()
    probs = np.exp(logp)
    probs[np.arange(len(y)), y] -= 1.0
    return loss, probs / len(y)


def _activate(z, act):
    if act == RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_deriv(z, a, act):
    if act == RELU:
        return (z > 0.0).astype(z.dtype)
    return 1.0 - a * a


def softmax_loss_grad(beta, x, y, d, k):
    """Mean cross-entropy of a linear softmax model and its gradient in ``beta``."""
    w = beta[: d * k].reshape(d, k)
    b = beta[d * k :]
    loss, dlogits = _log_softmax_terms(x @ w + b, y)
    grad = np.empty_like(beta)
    grad[: d * k] = (x.T @ dlogits).ravel()
    grad[d * k :] = dlogits.sum(axis=0)
    return loss, grad


def mlp_loss_grad(beta, x, y, d, h, k, act):
    """Mean cross-entropy of a one-hidden-layer network and its gradient in ``beta``.

    Layout of ``beta``: W1 (d, h), b1 (h), W2 (h, k), b2 (k), all row-major.
    """
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * k
    w1 = beta[:o1].reshape(d, h)
    b1 = beta[o1:o2]
    w2 = beta[o2:o3].reshape(h, k)
    b2 = beta[o3:]
    z = x @ w1 + b1
    a = _activate(z, act)
    loss, dlogits = _log_softmax_terms(a @ w2 + b2, y)
    grad = np.empty_like(beta)
    grad[o2:o3] = (a.T @ dlogits).ravel()
    grad[o3:] = dlogits.sum(axis=0)
    dz = (dlogits @ w2.T) * _activate_deriv(z, a, act)
    grad[:o1] = (x.T @ dz).ravel()
    grad[o1:o2] = dz.sum(axis=0)
    return loss, grad


def sgd_epoch_softmax(beta, vel, x, y, perm, batch, lr, momentum, coef, d, k):
    """One momentum-SGD pass over ``perm``; updates ``beta`` and ``vel`` in place."""
    n = perm.shape[0]
    for start in range(0, n, batch):
        idx = perm[start : start + batch]
        _, g = softmax_loss_grad(beta, x[idx], y[idx], d, k)
        g += 2.0 * coef * beta
        vel *= momentum
        vel -= lr * g
        beta += vel


def sgd_epoch_mlp(beta, vel, x, y, perm, batch, lr, momentum, coef, d, h, k, act):
    n = perm.shape[0]
    for start in range(0, n, batch):
        idx = perm[start : start + batch]
        _, g = mlp_loss_grad(beta, x[idx], y[idx], d, h, k, act)
        g += 2.0 * coef * beta
        vel *= momentum
        vel -= lr * g
        beta += vel
