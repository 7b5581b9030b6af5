"""Gradient-based bilevel hyperparameter optimization with a kriging value-function surrogate."""

from .baselines import BudgetSpec, HyperbandSpec, bayes_opt, grid_search, hyperband, random_search
from .gpr import GprModel, MleConfig, ValueSample, augment, mle_fit, predict, predict_grad
from .lower_level import LLO_COUNTER, Bounds, ModelSpec, Problem, TrainBudget, solve
from .optimizer import GbhoConfig, InnerSolveConfig, Status, run
from .report import RunReport, load_report, save_report

__version__ = "0.1.0"

__all__ = [
    "BudgetSpec", "HyperbandSpec", "bayes_opt", "grid_search", "hyperband", "random_search",
    "GprModel", "MleConfig", "ValueSample", "augment", "mle_fit", "predict", "predict_grad",
    "LLO_COUNTER", "Bounds", "ModelSpec", "Problem", "TrainBudget", "solve",
    "GbhoConfig", "InnerSolveConfig", "Status", "run",
    "RunReport", "load_report", "save_report",
]
