"""Constant-mean Gaussian process (kriging) surrogate over hyperparameter space.

Correlation between two points is ``exp(-0.5 * sum(((a - b) / l) ** 2))``.
The prior mean and process variance are profiled out in closed form, so
maximum-likelihood fitting searches over log length scales only.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, NotPositiveDefinite, OutOfBounds
from .linalg import CholeskyFactor, cholesky, log_det, solve_spd
from .lower_level import Bounds

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
DEDUP_RADIUS = 1e-6
# At a sample point the fitted mean misses the data by exactly nugget * alpha_i,
# so length scales with nugget * |alpha| above this (relative to the data
# scale) cannot interpolate and are excluded from the likelihood search.
INTERP_TOL = 1e-7
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ValueSample:
    points: np.ndarray
    values: np.ndarray
    bounds: Bounds

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if pts.shape[0] != vals.shape[0]:
            raise DimensionMismatch(f"{pts.shape[0]} points but {vals.shape[0]} values")
        if pts.shape[1] != self.bounds.n_dims:
            raise DimensionMismatch("points and bounds disagree on dimension")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def n_dims(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class MleConfig:
    """Length-scale search settings.

    ``log_ls_bounds`` defaults per dimension to
    ``[log(0.05 * width), log(10 * width)]`` of the sample box.
    """

    restarts: int = 8
    log_ls_bounds: Optional[tuple] = None
    nugget: float = 1e-10
    seed: int = 0
    sweeps: int = 2
    golden_iters: int = 24

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.log_ls_bounds is not None and not self.log_ls_bounds[0] < self.log_ls_bounds[1]:
            raise ValueError("log_ls_bounds must satisfy low < high")
        if self.nugget < 0:
            raise ValueError("nugget must be non-negative")

    def search_box(self, bounds: Bounds):
        if self.log_ls_bounds is not None:
            lo = np.full(bounds.n_dims, float(self.log_ls_bounds[0]))
            hi = np.full(bounds.n_dims, float(self.log_ls_bounds[1]))
            return lo, hi
        width = np.where(bounds.width > 0, bounds.width, 1.0)
        return np.log(0.05 * width), np.log(10.0 * width)


@dataclass(frozen=True)
class GprModel:
    mu: float
    sigma2: float
    length_scales: np.ndarray
    factor: Optional[CholeskyFactor]
    alpha: np.ndarray
    sample: ValueSample
    nugget: float
    config: MleConfig = field(default_factory=MleConfig)
    ones_solved: Optional[np.ndarray] = None
    log_lik: float = float("nan")
    degenerate: bool = False

    @property
    def bounds(self) -> Bounds:
        return self.sample.bounds


def kernel(a, b, length_scales) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    ls = np.atleast_1d(np.asarray(length_scales, dtype=np.float64))
    if a.shape != b.shape or a.shape != ls.shape:
        raise DimensionMismatch("kernel arguments need equal dimensions")
    t = (a - b) / ls
    return float(np.exp(-0.5 * np.dot(t, t)))


def correlation_matrix(points, length_scales, nugget=0.0):
    r = _kernels.rbf_cross(points, points, length_scales)
    if nugget:
        r[np.diag_indices_from(r)] += nugget
    return r


def log_likelihood(sample: ValueSample, mu, sigma2, length_scales, nugget=1e-10) -> float:
    """Gaussian log-density of the sample values under the process prior."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    fac = cholesky(correlation_matrix(sample.points, length_scales, nugget), escalate=False)
    resid = sample.values - mu
    quad = float(resid @ solve_spd(fac, resid))
    s = sample.size
    return -0.5 * (s * np.log(2.0 * np.pi * sigma2) + log_det(fac) + quad / sigma2)


def _profile(sample, length_scales, nugget):
    """Closed-form mean/variance at fixed length scales.

    Returns ``(loglik, mu, sigma2, factor, alpha, ones_solved)`` or None when
    the correlation matrix is numerically unusable.
    """
    try:
        fac = cholesky(correlation_matrix(sample.points, length_scales, nugget), escalate=False)
    except NotPositiveDefinite:
        return None
    y = sample.values
    s = sample.size
    ones_solved = solve_spd(fac, np.ones(s))
    mu = float(ones_solved @ y / ones_solved.sum())
    alpha = solve_spd(fac, y - mu)
    if nugget * np.abs(alpha).max() > INTERP_TOL * (1.0 + np.abs(y).max()):
        return None
    sigma2 = float((y - mu) @ alpha / s)
    if not sigma2 > 0:
        return None
    ll = -0.5 * (s * np.log(2.0 * np.pi * sigma2) + log_det(fac) + s)
    return ll, mu, sigma2, fac, alpha, ones_solved


def _golden_max(fn, lo, hi, iters):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    return (c, fc) if fc >= fd else (d, fd)


def _degenerate_model(sample, config):
    return GprModel(
        mu=float(sample.values[0]),
        sigma2=0.0,
        length_scales=np.ones(sample.n_dims),
        factor=None,
        alpha=np.zeros(sample.size),
        sample=sample,
        nugget=config.nugget,
        config=config,
        degenerate=True,
    )


def mle_fit(sample: ValueSample, config: MleConfig = MleConfig(), warm_start=None) -> GprModel:
    """Fit length scales by multi-start coordinate-wise golden-section search.

    Each restart sweeps the dimensions ``config.sweeps`` times, maximizing the
    concentrated log-likelihood along one log length scale at a time. A
    sample whose values are all equal yields a flat model with zero standard
    error and ``degenerate=True``.
    """
    if sample.size < 2:
        raise ValueError("need at least two sample points")
    if np.ptp(sample.values) <= 1e-12 * max(1.0, np.abs(sample.values).max()):
        logger.warning("degenerate sample: all values equal, returning flat model")
        return _degenerate_model(sample, config)

    lo, hi = config.search_box(sample.bounds)
    rng = np.random.default_rng(config.seed)
    starts = [0.5 * (lo + hi)] if warm_start is None else [np.clip(np.log(warm_start), lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(config.restarts - 1)]

    def objective(theta):
        prof = _profile(sample, np.exp(theta), config.nugget)
        return -np.inf if prof is None else prof[0]

    best_theta, best_ll = None, -np.inf
    for theta in starts:
        theta = np.array(theta, dtype=np.float64)
        ll = objective(theta)
        for _ in range(config.sweeps):
            for k in range(sample.n_dims):

                def along(v, k=k):
                    trial = theta.copy()
                    trial[k] = v
                    return objective(trial)

                v, fv = _golden_max(along, lo[k], hi[k], config.golden_iters)
                if fv > ll:
                    theta[k], ll = v, fv
        if ll > best_ll:
            best_theta, best_ll = theta, ll

    if best_theta is None:
        # every candidate was numerically singular; fall back to the shortest
        # length scales with jitter escalation
        return _fit_with_jitter(sample, np.exp(lo), config)
    ls = np.exp(best_theta)
    ll, mu, sigma2, fac, alpha, ones_solved = _profile(sample, ls, config.nugget)
    return GprModel(mu, sigma2, ls, fac, alpha, sample, config.nugget, config, ones_solved, ll)


def _fit_with_jitter(sample, ls, config):
    logger.info("all length scales singular; fitting with jitter escalation")
    fac = cholesky(correlation_matrix(sample.points, ls, config.nugget))
    y = sample.values
    ones_solved = solve_spd(fac, np.ones(sample.size))
    mu = float(ones_solved @ y / ones_solved.sum())
    alpha = solve_spd(fac, y - mu)
    sigma2 = max(float((y - mu) @ alpha / sample.size), np.finfo(float).tiny)
    return GprModel(mu, sigma2, ls, fac, alpha, sample, config.nugget + fac.jitter, config, ones_solved)


def _check_point(model, lam):
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if lam.shape != (model.sample.n_dims,):
        raise DimensionMismatch(f"lambda has shape {lam.shape}, model has {model.sample.n_dims} dims")
    if not model.bounds.contains(lam, tol=1e-9):
        raise OutOfBounds(f"lambda {lam} outside [{model.bounds.low}, {model.bounds.high}]")
    return lam


def _predict_terms(model, lams):
    r = _kernels.rbf_cross(lams, model.sample.points, model.length_scales)
    # The nugget is numerical regularization, not observation noise: a probe
    # that coincides with a sample point sees the same diagonal, so the
    # predictor reproduces the stored value with zero standard error there.
    r[r >= 1.0] += model.nugget
    mean = model.mu + r @ model.alpha
    v = _kernels.solve_lower(model.factor.lower, r.T)
    ones_k_r = r @ model.ones_solved
    one_k_one = float(model.ones_solved.sum())
    var = model.sigma2 * (1.0 - np.sum(v * v, axis=0) + (1.0 - ones_k_r) ** 2 / one_k_one)
    return r, mean, np.maximum(var, 0.0)


def predict(model: GprModel, lam):
    """Kriging mean and standard error at ``lam``; returns ``(mean, std)``."""
    lam = _check_point(model, lam)
    if model.degenerate:
        return model.mu, 0.0
    _, mean, var = _predict_terms(model, lam[None, :])
    return float(mean[0]), float(np.sqrt(var[0]))


def predict_many(model: GprModel, lams):
    """Vectorized ``predict`` over the rows of ``lams``; returns two arrays."""
    lams = np.atleast_2d(np.asarray(lams, dtype=np.float64))
    if not all(model.bounds.contains(row, tol=1e-9) for row in lams):
        raise OutOfBounds("probe points outside bounds")
    if model.degenerate:
        return np.full(len(lams), model.mu), np.zeros(len(lams))
    _, mean, var = _predict_terms(model, lams)
    return mean, np.sqrt(var)


def predict_grad(model: GprModel, lam, std_floor: float = STD_FLOOR):
    """Gradients of the kriging mean and standard error with respect to ``lam``.

    The standard-error gradient divides by ``max(std, std_floor)`` so it stays
    finite at sample points where the standard error vanishes.
    """
    return predict_with_grad(model, lam, std_floor)[2:]


def predict_with_grad(model: GprModel, lam, std_floor: float = STD_FLOOR):
    """``(mean, std, grad_mean, grad_std)`` at ``lam`` from one set of solves."""
    lam = _check_point(model, lam)
    n = lam.shape[0]
    if model.degenerate:
        return model.mu, 0.0, np.zeros(n), np.zeros(n)
    r, mean, var = _predict_terms(model, lam[None, :])
    r = r[0]
    # dr[i, k] = d r_i / d lam_k
    dr = -((lam[None, :] - model.sample.points) / model.length_scales**2) * r[:, None]
    grad_mean = dr.T @ model.alpha
    u = solve_spd(model.factor, r)
    ones_solved = model.ones_solved
    one_k_one = float(ones_solved.sum())
    grad_var = model.sigma2 * (
        -2.0 * (dr.T @ u) - 2.0 * (1.0 - ones_solved @ r) * (dr.T @ ones_solved) / one_k_one
    )
    std = float(np.sqrt(var[0]))
    return float(mean[0]), std, grad_mean, grad_var / (2.0 * max(std, std_floor))


def augment(model: GprModel, lam_new, phi_new, dedup_radius: float = DEDUP_RADIUS) -> GprModel:
    """Add ``(lam_new, phi_new)`` to the sample and refit.

    A point within ``dedup_radius`` (relative to the box diagonal) of an
    existing one replaces that point's value instead of being appended.
    Refitting warm-starts the length-scale search at the current values.
    """
    lam_new = _check_point(model, lam_new)
    sample = model.sample
    radius = dedup_radius * max(sample.bounds.diagonal, 1e-300)
    dist = np.linalg.norm(sample.points - lam_new, axis=1)
    j = int(np.argmin(dist))
    if dist[j] <= radius:
        if sample.values[j] == phi_new:
            return model
        values = sample.values.copy()
        values[j] = phi_new
        new_sample = replace(sample, values=values)
    else:
        new_sample = ValueSample(
            np.vstack([sample.points, lam_new]), np.append(sample.values, phi_new), sample.bounds
        )
    warm = None if model.degenerate else model.length_scales
    return mle_fit(new_sample, model.config, warm_start=warm)
