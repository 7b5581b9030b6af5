import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbho import datasets
from gbho.errors import DimensionMismatch
from gbho.lower_level import (
    Bounds,
    LloCounter,
    ModelSpec,
    Problem,
    TrainBudget,
    data_loss_grad,
    init_params,
    lower_loss,
    lower_value_grad,
    penalty,
    solve,
    upper_loss,
)


def rel_err(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6))


def fd_grad(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def small_mlp(groups=2, act="tanh", seed=0):
    data = datasets.make_blobs(30, 4, 3, seed=seed)
    return ModelSpec.mlp(4, 5, 3, n_groups=groups, activation=act), data


@pytest.mark.parametrize("arch", ["ridge", "logistic", "mlp"])
def test_lower_gradient_matches_fd(arch):
    rng = np.random.default_rng(5)
    if arch == "ridge":
        data, _ = datasets.make_linear_regression(20, 4, seed=1)
        spec = ModelSpec.ridge(4, n_groups=2)
    elif arch == "logistic":
        data = datasets.make_blobs(30, 4, 3, seed=1)
        spec = ModelSpec.logistic(4, 3)
    else:
        spec, data = small_mlp()
    for _ in range(5):
        lam = rng.uniform(-4, 0, spec.n_hyper)
        beta = rng.standard_normal(spec.n_params) * 0.5
        _, g_beta, g_lam = lower_value_grad(lam, beta, spec, data)
        assert rel_err(g_beta, fd_grad(lambda b: lower_loss(lam, b, spec, data), beta)) <= 1e-4
        assert rel_err(g_lam, fd_grad(lambda lm: lower_loss(lm, beta, spec, data), lam)) <= 1e-4


def test_relu_mlp_gradient_matches_fd():
    spec, data = small_mlp(act="relu", seed=3)
    beta = init_params(spec, 2) + 0.05
    g = data_loss_grad(beta, spec, data)[1]
    assert rel_err(g, fd_grad(lambda b: data_loss_grad(b, spec, data)[0], beta, h=1e-7)) <= 1e-4


def test_penalty_groups():
    spec = ModelSpec.mlp(2, 3, 2, n_groups=2)
    # hidden layer (weights + bias) is group 0, output layer group 1
    assert np.sum(spec.groups == 0) == 2 * 3 + 3
    assert np.sum(spec.groups == 1) == 3 * 2 + 2
    beta = np.ones(spec.n_params)
    assert penalty([0.0, np.log(2.0)], beta, spec.groups) == pytest.approx(9 + 2 * 8)


def test_ridge_matches_closed_form():
    data, _ = datasets.make_linear_regression(30, 3, seed=2)
    spec = ModelSpec.ridge(3)
    lam = np.array([-2.0])
    beta, phi = solve(lam, spec, data, counter=LloCounter())
    x, y = data.features, data.labels
    ref = np.linalg.solve(x.T @ x / 30 + np.exp(-2.0) * np.eye(3), x.T @ y / 30)
    np.testing.assert_allclose(beta, ref, rtol=1e-10)
    assert phi == pytest.approx(lower_loss(lam, ref, spec, data), rel=1e-12)


def test_ridge_weak_penalty_approaches_ols():
    data, _ = datasets.make_linear_regression(50, 3, seed=4)
    beta, _ = solve([-30.0], ModelSpec.ridge(3), data, counter=LloCounter())
    ols = np.linalg.lstsq(data.features, data.labels, rcond=None)[0]
    np.testing.assert_allclose(beta, ols, rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-10, 0), b=st.floats(-10, 0))
def test_phi_monotone_in_lambda(a, b):
    # phi is nondecreasing in lambda: a larger penalty never lowers the optimum
    data, _ = datasets.make_linear_regression(15, 3, seed=0)
    spec = ModelSpec.ridge(3)
    lo, hi = sorted((a, b))
    c = LloCounter()
    assert solve([lo], spec, data, counter=c)[1] <= solve([hi], spec, data, counter=c)[1] + 1e-12


def test_analytic_phi_matches_closed_form(analytic):
    c = LloCounter()
    for lam in np.linspace(-10, 0, 7):
        beta, phi = solve([lam], analytic.problem.spec, analytic.problem.train, counter=c)
        assert beta[0] == pytest.approx(analytic.beta_star(lam), rel=1e-12)
        assert phi == pytest.approx(analytic.phi(lam), rel=1e-12)
    assert c.count == 7


def test_counter_counts_each_solve_once():
    c = LloCounter()
    spec, data = small_mlp()
    budget = TrainBudget(max_epochs=2)
    for _ in range(3):
        solve([0.0, 0.0], spec, data, budget, c)
    assert c.count == 3
    c.reset()
    assert c.count == 0


def test_counter_thread_safe():
    c = LloCounter()

    def work():
        for _ in range(1000):
            c.increment()

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert c.count == 8000


def test_mlp_shrinks_with_penalty():
    spec, data = small_mlp(groups=1, act="relu")
    budget = TrainBudget(max_epochs=60, batch_size=10)
    c = LloCounter()
    weak, _ = solve([-8.0], spec, data, budget, c)
    strong, _ = solve([-1.0], spec, data, budget, c)
    assert np.linalg.norm(strong) < np.linalg.norm(weak)


def test_training_deterministic():
    spec, data = small_mlp(act="relu")
    budget = TrainBudget(max_epochs=5, seed=9)
    a, _ = solve([-3.0, -3.0], spec, data, budget, LloCounter())
    b, _ = solve([-3.0, -3.0], spec, data, budget, LloCounter())
    np.testing.assert_array_equal(a, b)


def test_training_reduces_loss():
    spec, data = small_mlp(groups=1, act="relu")
    beta0 = init_params(spec, 1)
    beta, phi = solve([-6.0], spec, data, TrainBudget(max_epochs=50, seed=1), LloCounter())
    assert phi < lower_loss([-6.0], beta0, spec, data)


def test_shape_errors(analytic):
    p = analytic.problem
    with pytest.raises(DimensionMismatch):
        solve([0.0, 0.0], p.spec, p.train, counter=LloCounter())
    with pytest.raises(DimensionMismatch):
        lower_loss([0.0], np.zeros(2), p.spec, p.train)
    with pytest.raises(DimensionMismatch):
        Problem(p.spec, p.train, p.valid, Bounds.box(2))


def test_upper_loss_excludes_penalty(analytic):
    p = analytic.problem
    assert upper_loss(np.array([0.5]), p.spec, p.valid) == 0.0


def test_bounds_helpers():
    b = Bounds.box(2)
    assert b.n_dims == 2 and b.diagonal == pytest.approx(np.sqrt(200))
    assert b.contains([-10, 0]) and not b.contains([0.1, -5])
    np.testing.assert_array_equal(b.project([5.0, -20.0]), [0.0, -10.0])
    pts = b.uniform(np.random.default_rng(0), size=100)
    assert all(b.contains(p) for p in pts)
