import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from gbho import gpr
from gbho.errors import DimensionMismatch, OutOfBounds
from gbho.lower_level import Bounds


def toy_sample(n=8, dims=1, seed=0):
    rng = np.random.default_rng(seed)
    b = Bounds.box(dims)
    pts = b.uniform(rng, size=n)
    vals = np.sin(pts.sum(axis=1) / 3.0) + 0.1 * (pts**2).sum(axis=1) / dims
    return gpr.ValueSample(pts, vals, b)


def analytic_sample(n=10):
    b = Bounds.box(1)
    pts = np.linspace(-10, 0, n)[:, None]
    t = np.exp(pts[:, 0])
    return gpr.ValueSample(pts, t / (1 + t), b)


def test_kernel_values():
    assert gpr.kernel([0.0], [0.0], [1.0]) == 1.0
    assert gpr.kernel([0.0, 0.0], [1.0, 2.0], [1.0, 2.0]) == pytest.approx(np.exp(-1.0))
    with pytest.raises(DimensionMismatch):
        gpr.kernel([0.0], [0.0, 1.0], [1.0])


def test_log_likelihood_matches_scipy():
    s = toy_sample(6, dims=2)
    ls = np.array([2.0, 3.0])
    cov = 0.7 * gpr.correlation_matrix(s.points, ls, 1e-10)
    ref = multivariate_normal(mean=np.full(6, 0.3), cov=cov).logpdf(s.values)
    assert gpr.log_likelihood(s, 0.3, 0.7, ls) == pytest.approx(ref, rel=1e-9)


def test_profiled_mean_and_variance_are_stationary():
    s = toy_sample(9)
    m = gpr.mle_fit(s)
    base = gpr.log_likelihood(s, m.mu, m.sigma2, m.length_scales, m.nugget)
    assert base == pytest.approx(m.log_lik, rel=1e-9)
    for dmu, ds in ((1e-3, 0), (-1e-3, 0), (0, 1.01), (0, 0.99)):
        sigma2 = m.sigma2 * (ds or 1.0)
        assert gpr.log_likelihood(s, m.mu + dmu, sigma2, m.length_scales, m.nugget) <= base + 1e-9


def test_mle_beats_brute_force_grid():
    s = analytic_sample()
    m = gpr.mle_fit(s)
    lo, hi = m.config.search_box(s.bounds)
    best = -np.inf
    for theta in np.linspace(lo[0], hi[0], 400):
        prof = gpr._profile(s, np.array([np.exp(theta)]), m.nugget)
        if prof is not None:
            best = max(best, prof[0])
    assert m.log_lik >= best - 1e-6 * abs(best)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 25), dims=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_interpolates_sample(n, dims, seed):
    s = toy_sample(n, dims, seed)
    m = gpr.mle_fit(s, gpr.MleConfig(restarts=3, seed=seed))
    mean, std = gpr.predict_many(m, s.points)
    assert np.all(np.abs(mean - s.values) <= 1e-6 * (1 + np.abs(s.values)))
    assert np.all(std <= 1e-4)


def test_predict_matches_explicit_inverse():
    s = toy_sample(7, dims=2, seed=3)
    m = gpr.mle_fit(s)
    k = gpr.correlation_matrix(s.points, m.length_scales, m.nugget)
    kinv = np.linalg.inv(k)
    one = np.ones(s.size)
    lam = np.array([-4.0, -6.5])
    r = np.array([gpr.kernel(lam, p, m.length_scales) for p in s.points])
    mean_ref = m.mu + r @ kinv @ (s.values - m.mu)
    var_ref = m.sigma2 * (1 - r @ kinv @ r + (1 - one @ kinv @ r) ** 2 / (one @ kinv @ one))
    mean, std = gpr.predict(m, lam)
    assert mean == pytest.approx(mean_ref, rel=1e-8)
    assert std == pytest.approx(np.sqrt(var_ref), rel=1e-6)


def test_far_from_data_reverts_to_prior():
    b = Bounds(np.array([-10.0]), np.array([10.0]))
    s = gpr.ValueSample(np.array([[-10.0], [-9.5], [-9.0]]), np.array([1.0, 2.0, 1.5]), b)
    m = gpr.mle_fit(s, gpr.MleConfig(log_ls_bounds=(np.log(0.5), np.log(1.0))))
    mean, std = gpr.predict(m, [10.0])
    assert mean == pytest.approx(m.mu, abs=1e-6)
    assert std >= np.sqrt(m.sigma2) * 0.999


def test_gradients_match_fd():
    s = toy_sample(10, dims=2, seed=7)
    m = gpr.mle_fit(s)
    rng = np.random.default_rng(0)
    h = 1e-6
    for lam in rng.uniform(-9, -1, size=(10, 2)):
        g_mean, g_std = gpr.predict_grad(m, lam)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            mp, sp = gpr.predict(m, lam + e)
            mm, sm = gpr.predict(m, lam - e)
            for a, n in ((g_mean[k], (mp - mm) / (2 * h)), (g_std[k], (sp - sm) / (2 * h))):
                assert abs(a - n) / max(abs(a), abs(n), 1e-6) <= 1e-4


def test_std_gradient_finite_at_sample_point():
    s = analytic_sample()
    m = gpr.mle_fit(s)
    _, g_std = gpr.predict_grad(m, s.points[3])
    assert np.all(np.isfinite(g_std))


def test_augment_appends_and_interpolates():
    s = analytic_sample()
    m = gpr.mle_fit(s)
    m2 = gpr.augment(m, [-0.5], 1.0 / (1.0 + np.exp(0.5)))
    assert m2.sample.size == 11
    mean, std = gpr.predict(m2, [-0.5])
    assert mean == pytest.approx(1.0 / (1.0 + np.exp(0.5)), abs=1e-6)
    assert std <= 1e-4


def test_augment_duplicate_replaces_value():
    s = analytic_sample()
    m = gpr.mle_fit(s)
    near = s.points[4] + 1e-9
    same = gpr.augment(m, near, s.values[4])
    assert same is m
    m2 = gpr.augment(m, near, s.values[4] + 0.01)
    assert m2.sample.size == s.size
    assert m2.sample.values[4] == pytest.approx(s.values[4] + 0.01)


def test_degenerate_flat_sample():
    b = Bounds.box(1)
    s = gpr.ValueSample(np.array([[-5.0], [-1.0], [-3.0]]), np.full(3, 2.5), b)
    m = gpr.mle_fit(s)
    assert m.degenerate
    assert gpr.predict(m, [-2.0]) == (2.5, 0.0)
    g_mean, g_std = gpr.predict_grad(m, [-2.0])
    assert not g_mean.any() and not g_std.any()


def test_errors():
    s = analytic_sample()
    m = gpr.mle_fit(s)
    with pytest.raises(OutOfBounds):
        gpr.predict(m, [1.0])
    with pytest.raises(DimensionMismatch):
        gpr.predict(m, [-1.0, -1.0])
    with pytest.raises(DimensionMismatch):
        gpr.ValueSample(np.zeros((3, 1)), np.zeros(2), Bounds.box(1))
    with pytest.raises(ValueError):
        gpr.mle_fit(gpr.ValueSample(np.zeros((1, 1)), np.zeros(1), Bounds.box(1)))


def test_fit_deterministic_per_seed():
    s = toy_sample(12, dims=2, seed=11)
    a = gpr.mle_fit(s, gpr.MleConfig(seed=4))
    b = gpr.mle_fit(s, gpr.MleConfig(seed=4))
    np.testing.assert_array_equal(a.length_scales, b.length_scales)
