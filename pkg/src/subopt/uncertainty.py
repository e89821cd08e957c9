"""Sandwich MSE approximations, MSE estimation and confidence ellipsoids.

Both matrix summaries have the form bread^{-1} meat bread^{-1}:

    amse      bread = full Hessian at theta_N,
              meat  = (1 / (n N^2)) sum_{i in U} g_i g_i^T / pi_i
    mse-hat   bread = IPW subsample Hessian at theta_n,
              meat  = (1 / (n^2 N^2)) sum_{i in S} g_i g_i^T / pi_i^2

with g_i the per-row gradient.  The first needs the full data and theta_N;
the second only the subsample.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import full_hess, row_grads, weighted_hess
from .errors import SingularHessian


class EstimateKind(enum.Enum):
    AMSE = "amse"
    MSE_HAT = "mse_hat"


@dataclass(frozen=True)
class SandwichEstimate:
    matrix: np.ndarray
    kind: EstimateKind
    bread: np.ndarray
    meat: np.ndarray
    n: int

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


@dataclass(frozen=True)
class ConfidenceSpec:
    level: float
    dof: int

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("confidence level must lie in (0, 1)")
        if self.dof < 1:
            raise ValueError("degrees of freedom must be at least 1")

    @property
    def threshold(self) -> float:
        return chi2_quantile(self.dof, self.level)


def _cholesky(A, what):
    lam = np.linalg.eigvalsh(A)
    if not lam[-1] > 0 or lam[0] <= 1e-12 * lam[-1]:
        raise SingularHessian(f"{what} is singular")
    try:
        return linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularHessian(f"{what} is not positive definite") from exc


def sandwich(bread, meat, kind: EstimateKind, n: int) -> SandwichEstimate:
    c = _cholesky(bread, "sandwich bread")
    left = linalg.cho_solve(c, meat, check_finite=False)
    M = linalg.cho_solve(c, left.T, check_finite=False)
    M = 0.5 * (M + M.T)
    return SandwichEstimate(M, kind, bread, meat, n)


def amse(model, data, plan, theta_N, n: int) -> SandwichEstimate:
    """Leading-order MSE of the IPW subsample solution for draws of size n from ``plan``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    N = data.N
    G = row_grads(model, data, theta_N)
    meat = G.T @ (G / plan.probs[:, None]) / (n * float(N) ** 2)
    meat = 0.5 * (meat + meat.T)
    return sandwich(full_hess(model, data, theta_N), meat, EstimateKind.AMSE, n)


def mse_estimate(model, data, draw, theta_n) -> SandwichEstimate:
    """Subsample-only estimate of the MSE of theta_n (repeats in the draw counted)."""
    N, n = data.N, draw.n
    G = row_grads(model, data, theta_n, draw.indices)
    Gs = G / draw.pi_values[:, None]
    meat = Gs.T @ Gs / (float(n) ** 2 * float(N) ** 2)
    meat = 0.5 * (meat + meat.T)
    return sandwich(weighted_hess(model, data, draw, theta_n), meat, EstimateKind.MSE_HAT, n)


def mspe(g_grad, est: SandwichEstimate) -> float:
    """Approximate E[g(theta_n) - g(theta_N)]^2 from the gradient of g."""
    v = np.asarray(g_grad, dtype=np.float64)
    return max(float(v @ est.matrix @ v), 0.0)


# --- chi-square quantile ------------------------------------------------------

def _gamma_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a, x):
    # modified Lentz for the upper tail Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    dd = 1.0 / b
    h = dd
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        dd = an * dd + b
        if abs(dd) < tiny:
            dd = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        dd = 1.0 / dd
        delta = dd * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cont_frac(a, x)


def chi2_cdf(x: float, dof: int) -> float:
    return regularized_gamma_p(dof / 2.0, x / 2.0)


def _chi2_pdf(x, dof):
    a = dof / 2.0
    return math.exp((a - 1.0) * math.log(x) - x / 2.0 - a * math.log(2.0) - math.lgamma(a))


def chi2_quantile(dof: int, q: float) -> float:
    """Inverse chi-square CDF by safeguarded Newton on P(dof/2, x/2) = q."""
    if dof < 1:
        raise ValueError("dof must be at least 1")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    lo, hi = 0.0, max(1.0, 2.0 * dof)
    while chi2_cdf(hi, dof) < q:
        lo, hi = hi, 2.0 * hi
    # Wilson-Hilferty start
    z = math.sqrt(2.0) * _erfinv(2.0 * q - 1.0)
    k = 2.0 / (9.0 * dof)
    x = dof * max(1.0 - k + z * math.sqrt(k), 1e-3) ** 3
    if not lo < x < hi:
        x = 0.5 * (lo + hi)
    for _ in range(200):
        fx = chi2_cdf(x, dof) - q
        if fx < 0:
            lo = x
        else:
            hi = x
        pdf = _chi2_pdf(x, dof)
        step = fx / pdf if pdf > 0 else math.inf
        nxt = x - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= 1e-14 * abs(x) or hi - lo <= 1e-15 * hi:
            return nxt
        x = nxt
    return x


def _erfinv(y):
    # only seeds Newton, so a few bisection steps on math.erf suffice
    lo, hi = -6.0, 6.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if math.erf(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --- confidence region --------------------------------------------------------

def ci_statistic(theta_n, candidate, est: SandwichEstimate) -> float:
    """(theta_n - candidate)^T M^{-1} (theta_n - candidate) for M = est.matrix."""
    diff = np.asarray(theta_n, dtype=np.float64) - np.asarray(candidate, dtype=np.float64)
    c = _cholesky(est.matrix, "MSE estimate")
    return float(diff @ linalg.cho_solve(c, diff, check_finite=False))


def in_confidence_region(theta_n, candidate, est: SandwichEstimate, spec: ConfidenceSpec) -> bool:
    return ci_statistic(theta_n, candidate, est) <= chi2_quantile(spec.dof, spec.level)


def empirical_mse(deviations) -> np.ndarray:
    """Average outer product of the rows of ``deviations`` (R x d)."""
    D = np.atleast_2d(np.asarray(deviations, dtype=np.float64))
    M = D.T @ D / D.shape[0]
    return 0.5 * (M + M.T)
