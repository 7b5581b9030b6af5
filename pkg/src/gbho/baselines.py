"""Reference hyperparameter searches: grid, random, GP expected improvement, Hyperband.

Every method trains through ``lower_level.solve`` so the shared counter sees
each training run, and every method returns the same ``RunReport`` as GBHO.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from . import gpr
from .errors import BudgetExceeded
from .lower_level import LLO_COUNTER, LloCounter, Problem, TrainBudget, data_loss_grad, solve, upper_loss
from .report import RunReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BudgetSpec:
    """Search budget. ``per_eval_budget`` of None means the problem's own budget."""

    max_llo: int
    per_eval_budget: Optional[TrainBudget] = None
    seed: int = 0

    def __post_init__(self):
        if self.max_llo < 1:
            raise ValueError("max_llo must be >= 1")


@dataclass(frozen=True)
class HyperbandSpec:
    max_resource: int = 81
    halving_eta: float = 3.0
    counting_mode: str = "runs"

    def __post_init__(self):
        if not self.halving_eta > 1:
            raise ValueError("halving_eta must exceed 1")
        if self.max_resource < self.halving_eta:
            raise ValueError("max_resource must be >= halving_eta")
        if self.counting_mode not in ("runs", "budget_normalized"):
            raise ValueError(f"unknown counting_mode {self.counting_mode!r}")


@dataclass
class _Trace:
    """Running record of evaluations for one search."""

    problem: Problem
    budget: TrainBudget
    counter: LloCounter
    start: int = 0
    evals: list = field(default_factory=list)

    def __post_init__(self):
        self.start = self.counter.count

    def evaluate(self, lam, budget: Optional[TrainBudget] = None):
        lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
        beta, _ = solve(lam, self.problem.spec, self.problem.train, budget or self.budget, self.counter)
        valid = upper_loss(beta, self.problem.spec, self.problem.valid)
        self.evals.append((valid, lam.copy(), beta))
        return valid, beta

    @property
    def used(self) -> int:
        return self.counter.count - self.start

    def report(self, method, seed, llo=None, extra=None, status="done", best=None):
        problem = self.problem
        valid, lam, beta = best if best is not None else min(self.evals, key=lambda t: t[0])
        train = data_loss_grad(beta, problem.spec, problem.train)[0]
        test = upper_loss(beta, problem.spec, problem.test) if problem.test is not None else float("nan")
        history = [{"lambda": e[1].tolist(), "valid": e[0]} for e in self.evals]
        return RunReport(
            method=method,
            problem=problem.name,
            lambda_star=lam,
            beta_star=beta,
            train_loss=train,
            valid_loss=valid,
            test_loss=test,
            llo_count=self.used if llo is None else llo,
            history=history,
            status=status,
            seed=seed,
            extra=extra or {},
        )


def grid_points(bounds, points_per_dim: int) -> np.ndarray:
    """Full factorial grid, first coordinate varying slowest."""
    axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in zip(bounds.low, bounds.high)]
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


def grid_search(problem: Problem, grid_points_per_dim: int, budget: BudgetSpec,
                counter: LloCounter = LLO_COUNTER) -> RunReport:
    """Evaluate every grid node and return the lowest validation loss (first wins ties)."""
    if grid_points_per_dim < 1:
        raise ValueError("grid_points_per_dim must be >= 1")
    size = grid_points_per_dim ** problem.bounds.n_dims
    if size > budget.max_llo:
        raise BudgetExceeded(f"grid of {size} points exceeds max_llo={budget.max_llo}")
    trace = _Trace(problem, budget.per_eval_budget or problem.budget, counter)
    for lam in grid_points(problem.bounds, grid_points_per_dim):
        trace.evaluate(lam)
    k = int(np.argmin([e[0] for e in trace.evals]))
    return trace.report("grid", budget.seed, best=trace.evals[k],
                        extra={"points_per_dim": grid_points_per_dim})


def random_search(problem: Problem, budget: BudgetSpec, counter: LloCounter = LLO_COUNTER) -> RunReport:
    rng = np.random.default_rng(budget.seed)
    trace = _Trace(problem, budget.per_eval_budget or problem.budget, counter)
    for lam in problem.bounds.uniform(rng, size=budget.max_llo):
        trace.evaluate(lam)
    k = int(np.argmin([e[0] for e in trace.evals]))
    return trace.report("random", budget.seed, best=trace.evals[k])


def expected_improvement(mean, std, best):
    """Expected value of ``max(0, best - Y)`` for ``Y ~ N(mean, std^2)`` (minimization)."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    gap = best - mean
    safe = np.where(std > 0, std, 1.0)
    u = gap / safe
    ei = gap * norm.cdf(u) + safe * norm.pdf(u)
    ei = np.where(std > 0, ei, np.maximum(gap, 0.0))
    return np.maximum(ei, 0.0) if ei.ndim else float(max(ei, 0.0))


def _ei_value_grad(model, lam, best):
    mean, std, g_mean, g_std = gpr.predict_with_grad(model, lam)
    if std <= 0:
        return max(best - mean, 0.0), np.zeros_like(lam)
    u = (best - mean) / std
    ei = (best - mean) * norm.cdf(u) + std * norm.pdf(u)
    grad = -norm.cdf(u) * g_mean + norm.pdf(u) * g_std
    return ei, grad


def propose_ei(model, bounds, best, rng, n_probe: int = 1000, refine: bool = True):
    """Maximize EI by a random probe followed by L-BFGS-B from the best probe."""
    probes = bounds.uniform(rng, size=n_probe)
    mean, std = gpr.predict_many(model, probes)
    ei = expected_improvement(mean, std, best)
    k = int(np.argmax(ei))
    lam, val = probes[k], float(ei[k])
    if refine and not model.degenerate:
        def neg(x):
            v, g = _ei_value_grad(model, bounds.project(x), best)
            return -v, -g

        res = minimize(neg, lam, jac=True, method="L-BFGS-B",
                       bounds=list(zip(bounds.low, bounds.high)), options={"maxiter": 100})
        if np.isfinite(res.fun) and -res.fun > val:
            lam, val = bounds.project(res.x), float(-res.fun)
    return bounds.project(lam), val


def bayes_opt(problem: Problem, budget: BudgetSpec, n_warmup: int = 10,
              counter: LloCounter = LLO_COUNTER, mle: Optional[gpr.MleConfig] = None,
              n_probe: int = 1000) -> RunReport:
    """GP expected-improvement search on the validation loss."""
    if not 1 <= n_warmup < budget.max_llo:
        raise ValueError("need 1 <= n_warmup < max_llo")
    rng = np.random.default_rng(budget.seed)
    bounds = problem.bounds
    mle = mle or gpr.MleConfig(seed=budget.seed)
    trace = _Trace(problem, budget.per_eval_budget or problem.budget, counter)
    for lam in bounds.uniform(rng, size=n_warmup):
        trace.evaluate(lam)
    radius = gpr.DEDUP_RADIUS * bounds.diagonal
    model = None
    fallbacks = 0
    while trace.used < budget.max_llo:
        pts = np.array([e[1] for e in trace.evals])
        vals = np.array([e[0] for e in trace.evals])
        sample = gpr.ValueSample(*_dedup(pts, vals, radius), bounds)
        model = gpr.mle_fit(sample, mle, warm_start=None if model is None else model.length_scales)
        lam, _ = propose_ei(model, bounds, float(vals.min()), rng, n_probe=n_probe)
        if np.min(np.linalg.norm(pts - lam, axis=1)) <= radius:
            lam = bounds.uniform(rng)
            fallbacks += 1
        trace.evaluate(lam)
    k = int(np.argmin([e[0] for e in trace.evals]))
    return trace.report("bayes", budget.seed, best=trace.evals[k],
                        extra={"n_warmup": n_warmup, "random_fallbacks": fallbacks})


def _dedup(points, values, radius):
    # keep the best value among points closer than radius
    keep_p, keep_v = [], []
    for p, v in sorted(zip(points, values), key=lambda t: t[1]):
        if all(np.linalg.norm(p - q) > radius for q in keep_p):
            keep_p.append(p)
            keep_v.append(v)
    return np.array(keep_p), np.array(keep_v)


def _as_fraction(x) -> Fraction:
    return Fraction(x).limit_denominator(10**6)


def hyperband_schedule(max_resource, eta):
    """Brackets as ``(s, n_configs, initial_resource)`` for ``s = s_max..0``.

    Arithmetic is exact (fractions), so ``n_configs`` never picks up a
    spurious extra config from rounding before the ceiling.
    """
    R, e = _as_fraction(max_resource), _as_fraction(eta)
    s_max = 0
    while e ** (s_max + 1) <= R:
        s_max += 1
    out = []
    for s in range(s_max, -1, -1):
        n = math.ceil(Fraction(s_max + 1, s + 1) * e**s)
        out.append((s, n, R / e**s))
    return out


def _keep(n, eta: Fraction) -> int:
    return math.floor(Fraction(n) / eta)


def hyperband_runs(max_resource, eta) -> int:
    """Total training runs of one Hyperband pass."""
    e = _as_fraction(eta)
    total = 0
    for s, n, _ in hyperband_schedule(max_resource, eta):
        alive = n
        for i in range(s + 1):
            total += alive
            alive = _keep(alive, e)
    return total


def top_k(losses, k):
    """Indices of the ``k`` smallest losses, ties broken by lower index."""
    return [int(i) for i in np.argsort(np.asarray(losses, dtype=np.float64), kind="stable")[:k]]


def hyperband(problem: Problem, spec: HyperbandSpec, budget: BudgetSpec,
              counter: LloCounter = LLO_COUNTER) -> RunReport:
    """Hyperband over epochs; every rung retrains its survivors from scratch.

    The report's ``extra["rungs"]`` lists, per bracket and rung, the config
    ids evaluated, their validation losses and the survivor ids.
    ``llo_count`` is the number of training runs, or the sum of resource
    fractions ``r / R`` under ``budget_normalized`` counting.
    """
    planned = hyperband_runs(spec.max_resource, spec.halving_eta)
    if planned > budget.max_llo:
        raise BudgetExceeded(f"Hyperband needs {planned} runs, max_llo={budget.max_llo}")
    rng = np.random.default_rng(budget.seed)
    base = budget.per_eval_budget or problem.budget
    trace = _Trace(problem, base, counter)
    eta = _as_fraction(spec.halving_eta)
    R = _as_fraction(spec.max_resource)
    rungs, normalized = [], 0.0
    for s, n, r0 in hyperband_schedule(spec.max_resource, spec.halving_eta):
        configs = problem.bounds.uniform(rng, size=n)
        alive = list(range(n))
        for i in range(s + 1):
            r = r0 * eta**i
            epochs = max(1, int(round(base.max_epochs * float(r / R))))
            rung_budget = replace(base, max_epochs=epochs)
            losses = [trace.evaluate(configs[j], rung_budget)[0] for j in alive]
            normalized += len(alive) * float(r / R)
            survivors = [alive[j] for j in top_k(losses, _keep(len(alive), eta))] if i < s else []
            rungs.append({"bracket": s, "rung": i, "resource": float(r), "epochs": epochs,
                          "ids": list(alive), "losses": losses, "survivors": survivors})
            alive = survivors
    llo = trace.used if spec.counting_mode == "runs" else normalized
    return trace.report("hyperband", budget.seed, llo=llo,
                        extra={"counting_mode": spec.counting_mode, "runs": trace.used, "rungs": rungs})
