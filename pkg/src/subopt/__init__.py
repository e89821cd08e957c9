"""Optimal subsampling for M-estimation on large datasets.

Weighted (inverse-probability) subsample estimators, plans that approximately
minimise their asymptotic MSE, sandwich MSE estimates and confidence
ellipsoids, plus a seeded simulation engine.
"""
from .core import Dataset, LossKind, LossModel
from .errors import DegeneratePlan, NoConvergence, SingularGram, SingularHessian, SuboptError
from .sampling import Method, Pilot, SampleDraw, SamplingPlan, build_plan, draw, fit_pilot
from .solver import Solution, solve_full, solve_subsample_equal, solve_subsample_weighted
from .uncertainty import ConfidenceSpec, amse, chi2_quantile, ci_statistic, mse_estimate

__version__ = "0.1.0"

__all__ = [
    "ConfidenceSpec", "Dataset", "DegeneratePlan", "LossKind", "LossModel", "Method",
    "NoConvergence", "Pilot", "SampleDraw", "SamplingPlan", "SingularGram", "SingularHessian",
    "Solution", "SuboptError", "amse", "build_plan", "chi2_quantile", "ci_statistic", "draw",
    "fit_pilot", "mse_estimate", "solve_full", "solve_subsample_equal",
    "solve_subsample_weighted", "__version__",
]
