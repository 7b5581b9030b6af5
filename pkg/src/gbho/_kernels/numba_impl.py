"""numba-compiled kernels; see ``numpy_impl`` for the reference semantics."""

import numba as nb
import numpy as np

RELU = 0
TANH = 1


@nb.njit(cache=True)
def cholesky_lower(a):
    n = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(n):
        s = a[j, j]
        for p in range(j):
            s -= lower[j, p] * lower[j, p]
        if not s > 0.0:
            return lower, False
        ljj = np.sqrt(s)
        lower[j, j] = ljj
        for i in range(j + 1, n):
            t = a[i, j]
            for p in range(j):
                t -= lower[i, p] * lower[j, p]
            lower[i, j] = t / ljj
    return lower, True


@nb.njit(cache=True)
def solve_lower(lower, b):
    # b is 2-D (n, m)
    n, m = b.shape
    x = np.empty_like(b)
    for c in range(m):
        for i in range(n):
            s = b[i, c]
            for p in range(i):
                s -= lower[i, p] * x[p, c]
            x[i, c] = s / lower[i, i]
    return x


@nb.njit(cache=True)
def solve_lower_t(lower, b):
    n, m = b.shape
    x = np.empty_like(b)
    for c in range(m):
        for i in range(n - 1, -1, -1):
            s = b[i, c]
            for p in range(i + 1, n):
                s -= lower[p, i] * x[p, c]
            x[i, c] = s / lower[i, i]
    return x


@nb.njit(cache=True)
def rbf_cross(a, b, length_scales):
    na, dim = a.shape
    nb_ = b.shape[0]
    out = np.empty((na, nb_))
    for i in range(na):
        for j in range(nb_):
            s = 0.0
            for k in range(dim):
                t = (a[i, k] - b[j, k]) / length_scales[k]
                s += t * t
            out[i, j] = np.exp(-0.5 * s)
    return out


@nb.njit(cache=True)
def _log_softmax_terms(logits, y):
    n, k = logits.shape
    loss = 0.0
    dlogits = np.empty_like(logits)
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, k):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(k):
            s += np.exp(logits[i, j] - m)
        lse = m + np.log(s)
        loss -= logits[i, y[i]] - lse
        for j in range(k):
            dlogits[i, j] = np.exp(logits[i, j] - lse)
        dlogits[i, y[i]] -= 1.0
    return loss / n, dlogits / n


@nb.njit(cache=True)
def softmax_loss_grad(beta, x, y, d, k):
    w = beta[: d * k].reshape((d, k))
    b = beta[d * k :]
    loss, dlogits = _log_softmax_terms(np.dot(x, w) + b, y)
    grad = np.empty_like(beta)
    grad[: d * k] = np.dot(x.T, dlogits).ravel()
    grad[d * k :] = dlogits.sum(axis=0)
    return loss, grad


@nb.njit(cache=True)
def mlp_loss_grad(beta, x, y, d, h, k, act):
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * k
    w1 = beta[:o1].reshape((d, h))
    b1 = beta[o1:o2]
    w2 = beta[o2:o3].reshape((h, k))
    b2 = beta[o3:]
    z = np.dot(x, w1) + b1
    if act == RELU:
        a = np.maximum(z, 0.0)
        da = (z > 0.0) * 1.0
    else:
        a = np.tanh(z)
        da = 1.0 - a * a
    loss, dlogits = _log_softmax_terms(np.dot(a, w2) + b2, y)
    grad = np.empty_like(beta)
    grad[o2:o3] = np.dot(a.T, dlogits).ravel()
    grad[o3:] = dlogits.sum(axis=0)
    dz = np.dot(dlogits, np.ascontiguousarray(w2.T)) * da
    grad[:o1] = np.dot(x.T, dz).ravel()
    grad[o1:o2] = dz.sum(axis=0)
    return loss, grad


@nb.njit(cache=True)
def sgd_epoch_softmax(beta, vel, x, y, perm, batch, lr, momentum, coef, d, k):
    n = perm.shape[0]
    for start in range(0, n, batch):
        idx = perm[start : start + batch]
        _, g = softmax_loss_grad(beta, x[idx], y[idx], d, k)
        for j in range(beta.shape[0]):
            vel[j] = momentum * vel[j] - lr * (g[j] + 2.0 * coef[j] * beta[j])
            beta[j] += vel[j]


@nb.njit(cache=True)
def sgd_epoch_mlp(beta, vel, x, y, perm, batch, lr, momentum, coef, d, h, k, act):
    n = perm.shape[0]
    for start in range(0, n, batch):
        idx = perm[start : start + batch]
        _, g = mlp_loss_grad(beta, x[idx], y[idx], d, h, k, act)
        for j in range(beta.shape[0]):
            vel[j] = momentum * vel[j] - lr * (g[j] + 2.0 * coef[j] * beta[j])
            beta[j] += vel[j]
