"""Damped Newton solver for full-data and subsampled risks.

All four objectives are weighted sums of per-row losses, sum_i w_i f(theta; x_i):

    FULL      all N rows,          w_i = 1/N
    WEIGHTED  draw S (with repeats), w_i = 1/(N n pi_i)
    EQUAL     draw S (with repeats), w_i = 1/n
    PILOT     explicit rows S0,      w_i = 1/n0
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .core import Dataset, LossModel, design, ipw_weights, risk_value, weighted_sums
from .errors import NoConvergence, SingularHessian

ARMIJO = 1e-4
MAX_HALVINGS = 40
RIDGE_DOUBLINGS = 6
STEP_TOL = 1e-14
# curvature along some direction shrinking by this factor means the iterates
# are drifting off to infinity (e.g. a separable logistic subsample)
COLLAPSE_RATIO = 1e-8
THETA_SANITY = 1e6


class Objective(enum.Enum):
    FULL = "full"
    WEIGHTED = "weighted"
    EQUAL = "equal"
    PILOT = "pilot"


@dataclass(frozen=True)
class SolveSpec:
    objective: Objective = Objective.FULL
    draw: Optional[object] = None
    rows: Optional[np.ndarray] = None
    init: Optional[np.ndarray] = None
    tol_grad: float = 1e-10
    max_iter: int = 100
    ridge0: float = 0.0

    def __post_init__(self):
        if not self.tol_grad > 0:
            raise ValueError("tol_grad must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.objective in (Objective.WEIGHTED, Objective.EQUAL) and self.draw is None:
            raise ValueError(f"{self.objective.value} objective needs a draw")
        if self.objective is Objective.PILOT and self.rows is None:
            raise ValueError("pilot objective needs row indices")


@dataclass(frozen=True)
class Solution:
    theta: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool
    final_hess: np.ndarray
    objective_value: float = float("nan")
    message: str = ""

    def require_converged(self) -> "Solution":
        if not self.converged:
            raise NoConvergence(self.message or "Newton's method did not converge", self)
        return self


def objective_terms(data: Dataset, spec: SolveSpec):
    """Rows, responses and weights of the objective described by ``spec``."""
    X, y = design(data)
    obj = spec.objective
    if obj is Objective.FULL:
        return X, y, np.full(data.N, 1.0 / data.N)
    if obj is Objective.PILOT:
        rows = np.asarray(spec.rows, dtype=np.int64)
        return X[rows], y[rows], np.full(rows.shape[0], 1.0 / rows.shape[0])
    d = spec.draw
    if d.n < 1:
        raise ValueError("empty draw")
    if obj is Objective.WEIGHTED:
        return X[d.indices], y[d.indices], ipw_weights(data.N, d.pi_values)
    return X[d.indices], y[d.indices], np.full(d.n, 1.0 / d.n)


def _factor(H, ridge0):
    try:
        return linalg.cho_factor(H, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    d = H.shape[0]
    ridge = max(ridge0, 1e-8 * np.trace(H) / d)
    if not ridge > 0:
        raise SingularHessian("Hessian is zero; ridge escalation impossible")
    for _ in range(RIDGE_DOUBLINGS):
        try:
            return linalg.cho_factor(H + ridge * np.eye(d), lower=True, check_finite=False)
        except linalg.LinAlgError:
            ridge *= 2.0
    raise SingularHessian("Hessian not positive definite after ridge escalation")


def _check_rank(H):
    lam = np.linalg.eigvalsh(H)
    if not lam[-1] > 0 or lam[0] <= 1e-12 * lam[-1]:
        raise SingularHessian(
            "objective Hessian is singular (rank-deficient design; the subsample Hessian "
            "event failed)")


def _curvature_ratio(H_final, L0):
    """Smallest generalized eigenvalue of H_final relative to the starting Hessian."""
    A = linalg.solve_triangular(L0, H_final, lower=True, check_finite=False)
    A = linalg.solve_triangular(L0, A.T, lower=True, check_finite=False)
    return np.linalg.eigvalsh(0.5 * (A + A.T))[0]


def newton_solve(model: LossModel, data: Dataset, spec: SolveSpec) -> Solution:
    """Minimise the objective in ``spec`` by Newton's method with Armijo backtracking.

    Raises SingularHessian when the objective's Hessian is singular at the
    starting point (a rank-deficient design) or cannot be factorized even after
    ridge escalation.  Running out of iterations, or iterates drifting to
    infinity, is reported through ``converged=False`` rather than raised.
    """
    model.check(data)
    X, y, w = objective_terms(data, spec)
    d = X.shape[1]
    theta = np.zeros(d) if spec.init is None else np.array(spec.init, dtype=np.float64)
    if theta.shape != (d,) or not np.all(np.isfinite(theta)):
        raise ValueError("init must be a finite vector of length d")

    s = weighted_sums(model, X, y, w, theta)
    f, g, H = s["loss"], s["grad"], s["hess"]
    _check_rank(H)
    L0 = np.linalg.cholesky(H)
    g0 = float(np.linalg.norm(g))
    tol = spec.tol_grad * max(1.0, g0)
    gnorm = g0
    converged = False
    message = ""
    it = 0
    while True:
        if gnorm <= tol:
            converged = True
            break
        if it >= spec.max_iter:
            message = f"no convergence within {spec.max_iter} iterations (grad norm {gnorm:.3e})"
            break
        c = _factor(H, spec.ridge0)
        p = -linalg.cho_solve(c, g, check_finite=False)
        slope = float(g @ p)
        t = 1.0
        accepted = None
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + t * p
            fc = risk_value(model, X, y, w, cand)
            if fc <= f + ARMIJO * t * slope:
                accepted = weighted_sums(model, X, y, w, cand)
                break
            # at the noise floor of f the Armijo test is meaningless; accept a
            # full step that still reduces the gradient
            if t == 1.0 and abs(fc - f) <= 64 * np.finfo(float).eps * max(1.0, abs(f)):
                sc = weighted_sums(model, X, y, w, cand)
                if np.linalg.norm(sc["grad"]) < gnorm:
                    accepted = sc
                    break
            t *= 0.5
        if accepted is None:
            message = "line search failed to find a decrease"
            break
        step = t * p
        theta = theta + step
        f, g, H = accepted["loss"], accepted["grad"], accepted["hess"]
        gnorm = float(np.linalg.norm(g))
        it += 1
        if float(np.linalg.norm(step)) <= STEP_TOL:
            converged = True
            break

    if converged:
        if np.linalg.norm(theta) > THETA_SANITY:
            converged, message = False, "iterates left the sanity box |theta| <= 1e6"
        elif _curvature_ratio(H, L0) < COLLAPSE_RATIO:
            converged, message = False, "curvature collapsed; iterates drifting (separable data?)"
    return Solution(theta, gnorm, it, converged, H, f, message)


def solve_full(model, data, init=None, **kw) -> Solution:
    return newton_solve(model, data, SolveSpec(Objective.FULL, init=init, **kw))


def solve_subsample_weighted(model, data, draw, init=None, **kw) -> Solution:
    return newton_solve(model, data, SolveSpec(Objective.WEIGHTED, draw=draw, init=init, **kw))


def solve_subsample_equal(model, data, draw, init=None, **kw) -> Solution:
    return newton_solve(model, data, SolveSpec(Objective.EQUAL, draw=draw, init=init, **kw))


def solve_pilot(model, data, rows, init=None, **kw) -> Solution:
    return newton_solve(model, data, SolveSpec(Objective.PILOT, rows=rows, init=init, **kw))
