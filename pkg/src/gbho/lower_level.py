"""Lower-level training problem: models, L2 penalty, losses, gradients and the trainer.

Hyperparameters live in log space; group ``g`` of the parameter vector is
penalized with coefficient ``exp(lam[g])``. The training loss is a mean over
examples and the penalty is not divided by the example count.
"""

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .datasets import LabeledSet
from .errors import DimensionMismatch, Diverged
from .linalg import cholesky, solve_spd

DEFAULT_BOUNDS = (-10.0, 0.0)


class LloCounter:
    """Thread-safe count of lower-level optimizations (training runs)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self) -> int:
        with self._lock:
            self._count += 1
            return self._count

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def reset(self):
        with self._lock:
            self._count = 0


LLO_COUNTER = LloCounter()


@dataclass(frozen=True)
class Bounds:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        high = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        if low.shape != high.shape or np.any(low > high):
            raise ValueError("bounds need matching shapes and low <= high")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def box(cls, n_dims: int, low: float = DEFAULT_BOUNDS[0], high: float = DEFAULT_BOUNDS[1]):
        return cls(np.full(n_dims, low), np.full(n_dims, high))

    @property
    def n_dims(self) -> int:
        return self.low.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.high - self.low

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.width))

    def contains(self, lam, tol: float = 1e-12) -> bool:
        lam = np.asarray(lam, dtype=np.float64)
        slack = tol * np.maximum(1.0, self.width)
        return bool(np.all(lam >= self.low - slack) and np.all(lam <= self.high + slack))

    def project(self, lam) -> np.ndarray:
        return np.clip(lam, self.low, self.high)

    def uniform(self, rng, size=None) -> np.ndarray:
        shape = (self.n_dims,) if size is None else (size, self.n_dims)
        return rng.uniform(self.low, self.high, size=shape)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus the map from parameter index to regularization group.

    ``arch`` is one of ``ridge`` (squared error, no intercept), ``logistic``
    (linear softmax) or ``mlp`` (one hidden layer, softmax output).
    """

    arch: str
    n_features: int
    groups: np.ndarray
    n_classes: int = 0
    hidden: int = 0
    activation: str = "relu"

    def __post_init__(self):
        groups = np.asarray(self.groups, dtype=np.int64)
        object.__setattr__(self, "groups", groups)
        if self.arch not in ("ridge", "logistic", "mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.arch == "mlp" and self.hidden <= 0:
            raise ValueError("mlp needs hidden > 0")
        if self.arch != "ridge" and self.n_classes < 2:
            raise ValueError("classification models need n_classes >= 2")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if groups.shape != (self.n_params,):
            raise DimensionMismatch(
                f"group map covers {groups.size} parameters, model has {self.n_params}"
            )
        present = np.unique(groups)
        if present[0] != 0 or not np.array_equal(present, np.arange(present.size)):
            raise ValueError("group indices must be contiguous from 0")

    @property
    def loss(self) -> str:
        return "squared_error" if self.arch == "ridge" else "cross_entropy"

    @property
    def n_params(self) -> int:
        d, k, h = self.n_features, self.n_classes, self.hidden
        if self.arch == "ridge":
            return d
        if self.arch == "logistic":
            return d * k + k
        return d * h + h + h * k + k

    @property
    def n_hyper(self) -> int:
        return int(self.groups.max()) + 1

    @classmethod
    def ridge(cls, n_features: int, n_groups: int = 1):
        groups = np.concatenate(
            [np.full(len(c), g) for g, c in enumerate(np.array_split(np.arange(n_features), n_groups))]
        )
        return cls("ridge", n_features, groups)

    @classmethod
    def logistic(cls, n_features: int, n_classes: int):
        return cls("logistic", n_features, np.zeros(n_features * n_classes + n_classes), n_classes)

    @classmethod
    def mlp(cls, n_features: int, hidden: int, n_classes: int, n_groups: int = 1, activation="relu"):
        """One hidden layer. With ``n_groups=2`` the hidden layer (weights and
        bias) is group 0 and the output layer is group 1."""
        n_hidden_params = n_features * hidden + hidden
        n_out_params = hidden * n_classes + n_classes
        if n_groups == 1:
            groups = np.zeros(n_hidden_params + n_out_params)
        elif n_groups == 2:
            groups = np.concatenate([np.zeros(n_hidden_params), np.ones(n_out_params)])
        else:
            raise ValueError("mlp supports one or two regularization groups")
        return cls("mlp", n_features, groups, n_classes, hidden, activation)


@dataclass(frozen=True)
class TrainBudget:
    max_epochs: int = 200
    batch_size: Optional[int] = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    tol_grad: float = 1e-4
    seed: int = 0
    check_every: int = 1

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need learning_rate > 0 and momentum in [0, 1)")


@dataclass(frozen=True)
class Problem:
    """Model, data splits and hyperparameter box handed to every search method."""

    spec: ModelSpec
    train: LabeledSet
    valid: LabeledSet
    bounds: Bounds
    test: Optional[LabeledSet] = None
    budget: TrainBudget = field(default_factory=TrainBudget)
    name: str = "problem"

    def __post_init__(self):
        if self.bounds.n_dims != self.spec.n_hyper:
            raise DimensionMismatch(
                f"bounds have {self.bounds.n_dims} dims, model has {self.spec.n_hyper} groups"
            )


def _check(lam, beta, spec: ModelSpec):
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    beta = np.asarray(beta, dtype=np.float64)
    if lam.shape != (spec.n_hyper,):
        raise DimensionMismatch(f"lambda has shape {lam.shape}, model has {spec.n_hyper} groups")
    if beta.shape != (spec.n_params,):
        raise DimensionMismatch(f"beta has shape {beta.shape}, model has {spec.n_params} params")
    return lam, beta


def penalty_coef(lam, groups) -> np.ndarray:
    """Per-parameter penalty coefficient ``exp(lam[group])``."""
    return np.exp(np.asarray(lam, dtype=np.float64))[groups]


def penalty(lam, beta, groups) -> float:
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    groups = np.asarray(groups)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != groups.shape or groups.max(initial=-1) + 1 != lam.size:
        raise DimensionMismatch("lambda, beta and group map disagree")
    sq = np.bincount(groups, weights=beta * beta, minlength=lam.size)
    return float(np.dot(np.exp(lam), sq))


def data_loss_grad(beta, spec: ModelSpec, data: LabeledSet):
    """Mean unpenalized loss over ``data`` and its gradient in ``beta``."""
    x, y = data.features, data.labels
    if x.shape[1] != spec.n_features:
        raise DimensionMismatch(f"data has {x.shape[1]} features, model expects {spec.n_features}")
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    if spec.arch == "ridge":
        resid = x @ beta - y
        return float(np.mean(resid**2)), (2.0 / len(y)) * (x.T @ resid)
    if spec.arch == "logistic":
        loss, grad = _kernels.softmax_loss_grad(beta, x, y, spec.n_features, spec.n_classes)
    else:
        act = _kernels.RELU if spec.activation == "relu" else _kernels.TANH
        loss, grad = _kernels.mlp_loss_grad(
            beta, x, y, spec.n_features, spec.hidden, spec.n_classes, act
        )
    return float(loss), grad


def lower_loss(lam, beta, spec: ModelSpec, data: LabeledSet) -> float:
    lam, beta = _check(lam, beta, spec)
    return data_loss_grad(beta, spec, data)[0] + penalty(lam, beta, spec.groups)


def lower_value_grad(lam, beta, spec: ModelSpec, data: LabeledSet):
    """Return ``(f, grad_beta, grad_lambda)`` of the penalized training objective."""
    lam, beta = _check(lam, beta, spec)
    loss, g_beta = data_loss_grad(beta, spec, data)
    coef = penalty_coef(lam, spec.groups)
    g_beta = g_beta + 2.0 * coef * beta
    sq = np.bincount(spec.groups, weights=beta * beta, minlength=lam.size)
    g_lam = np.exp(lam) * sq
    return loss + float(np.dot(np.exp(lam), sq)), g_beta, g_lam


def lower_grad(lam, beta, spec: ModelSpec, data: LabeledSet):
    _, g_beta, g_lam = lower_value_grad(lam, beta, spec, data)
    return g_beta, g_lam


def upper_loss(beta, spec: ModelSpec, data: LabeledSet) -> float:
    """Unpenalized mean loss, used on validation and test sets."""
    return data_loss_grad(beta, spec, data)[0]


def upper_value_grad(beta, spec: ModelSpec, data: LabeledSet):
    return data_loss_grad(beta, spec, data)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    d, k, h = spec.n_features, spec.n_classes, spec.hidden
    if spec.arch == "ridge":
        return np.zeros(d)
    if spec.arch == "logistic":
        lim = np.sqrt(6.0 / (d + k))
        return np.concatenate([rng.uniform(-lim, lim, d * k), np.zeros(k)])
    lim1 = np.sqrt(6.0 / (d + h))
    lim2 = np.sqrt(6.0 / (h + k))
    return np.concatenate(
        [rng.uniform(-lim1, lim1, d * h), np.zeros(h), rng.uniform(-lim2, lim2, h * k), np.zeros(k)]
    )


def _solve_ridge(lam, spec, data):
    x, y = data.features, data.labels
    coef = penalty_coef(lam, spec.groups)
    a = x.T @ x + len(y) * np.diag(coef)
    return solve_spd(cholesky(0.5 * (a + a.T)), x.T @ y)


def _train_sgd(lam, spec, data, budget):
    rng = np.random.default_rng(budget.seed)
    beta = init_params(spec, budget.seed)
    vel = np.zeros_like(beta)
    coef = penalty_coef(lam, spec.groups)
    n = len(data)
    batch = n if budget.batch_size is None else min(budget.batch_size, n)
    x, y = data.features, data.labels
    d, k, h = spec.n_features, spec.n_classes, spec.hidden
    act = _kernels.RELU if spec.activation == "relu" else _kernels.TANH
    for epoch in range(budget.max_epochs):
        perm = rng.permutation(n)
        if spec.arch == "logistic":
            _kernels.sgd_epoch_softmax(
                beta, vel, x, y, perm, batch, budget.learning_rate, budget.momentum, coef, d, k
            )
        else:
            _kernels.sgd_epoch_mlp(
                beta, vel, x, y, perm, batch, budget.learning_rate, budget.momentum, coef, d, h, k, act
            )
        if not np.all(np.isfinite(beta)):
            raise Diverged(f"non-finite parameters after epoch {epoch + 1}")
        if (epoch + 1) % budget.check_every == 0:
            _, g_beta, _ = lower_value_grad(lam, beta, spec, data)
            if np.linalg.norm(g_beta) <= budget.tol_grad:
                break
    return beta


def solve(lam, spec: ModelSpec, train: LabeledSet, budget: TrainBudget = TrainBudget(),
          counter: LloCounter = LLO_COUNTER):
    """Train the lower-level model at ``lam``; return ``(beta_star, phi)``.

    Ridge uses the exact normal equations; classification models use
    momentum SGD. ``phi`` is always the full-batch penalized training
    objective at the returned parameters. Counts one LLO per call.
    """
    counter.increment()
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if lam.shape != (spec.n_hyper,):
        raise DimensionMismatch(f"lambda has shape {lam.shape}, model has {spec.n_hyper} groups")
    if spec.arch == "ridge":
        beta = _solve_ridge(lam, spec, train)
    else:
        beta = _train_sgd(lam, spec, train, budget)
    phi = lower_loss(lam, beta, spec, train)
    if not np.isfinite(phi):
        raise Diverged(f"lower-level objective is {phi} at lambda={lam}")
    return beta, phi
