"""Sampling plans and with-replacement subsample draws.

A plan is a probability vector over the N rows plus a Vose alias table, so a
draw of size n costs O(n) after an O(N) build.  Non-uniform plans are mixed
with the uniform distribution,

    pi_i = (1 - beta) * s_i / sum(s) + beta / N,

which guarantees min_i N pi_i >= beta and keeps the inverse-probability
weights bounded.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy import linalg

from .core import Dataset, LossModel, design, link_derivatives
from .errors import DegeneratePlan, SingularGram, SingularHessian
from .solver import solve_pilot

DEFAULT_FLOOR = 0.05
PILOT_MIN = 500


class Method(enum.Enum):
    UNIF = "unif"
    LEV = "lev"
    GRAD = "grad"
    HESSIAN = "hessian"

    @property
    def label(self) -> str:
        return "Hessian" if self is Method.HESSIAN else self.name

    @property
    def needs_pilot(self) -> bool:
        return self in (Method.GRAD, Method.HESSIAN)

    @property
    def stream_id(self) -> int:
        return list(Method).index(self)


# --- alias table --------------------------------------------------------------

@numba.njit(cache=True)
def _vose_build(probs):
    n = probs.shape[0]
    scaled = probs * n
    cutoff = np.ones(n)
    alias = np.arange(n)
    small = np.empty(n, dtype=np.int64)
    large = np.empty(n, dtype=np.int64)
    ns = 0
    nl = 0
    for i in range(n):
        if scaled[i] < 1.0:
            small[ns] = i
            ns += 1
        else:
            large[nl] = i
            nl += 1
    while ns > 0 and nl > 0:
        ns -= 1
        s = small[ns]
        g = large[nl - 1]
        cutoff[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            nl -= 1
            small[ns] = g
            ns += 1
    # leftovers are 1 up to rounding
    return cutoff, alias


@dataclass(frozen=True)
class AliasTable:
    """Vose alias table: column j keeps itself w.p. ``cutoff[j]``, else ``alias[j]``."""

    cutoff: np.ndarray
    alias: np.ndarray

    @classmethod
    def build(cls, probs) -> "AliasTable":
        probs = np.ascontiguousarray(probs, dtype=np.float64)
        cutoff, alias = _vose_build(probs)
        cutoff.flags.writeable = False
        alias.flags.writeable = False
        return cls(cutoff, alias)

    @property
    def size(self) -> int:
        return self.cutoff.shape[0]

    def probabilities(self) -> np.ndarray:
        """Reconstruct the distribution the table encodes."""
        n = self.size
        p = self.cutoff.copy()
        np.add.at(p, self.alias, 1.0 - self.cutoff)
        return p / n

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        cols = rng.integers(0, self.size, size=n)
        coins = rng.random(n)
        return np.where(coins < self.cutoff[cols], cols, self.alias[cols])


# --- plans --------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    probs: np.ndarray
    beta: float = 0.0
    method: str = "custom"
    table: AliasTable = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True).reshape(-1)
        if probs.size < 1 or np.any(~np.isfinite(probs)) or np.any(probs <= 0):
            raise ValueError("plan probabilities must be finite and strictly positive")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"plan probabilities sum to {probs.sum()!r}, not 1")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)
        if self.table is None:
            object.__setattr__(self, "table", AliasTable.build(probs))

    @property
    def N(self) -> int:
        return self.probs.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "probability"])
            for i, p in enumerate(self.probs):
                w.writerow([i, repr(float(p))])

    @classmethod
    def from_csv(cls, path, method: str = "file") -> "SamplingPlan":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        idx = np.array([int(r["index"]) for r in rows])
        if not np.array_equal(idx, np.arange(len(rows))):
            raise ValueError("plan CSV must list indices 0..N-1 in order")
        probs = np.array([float(r["probability"]) for r in rows])
        return cls(probs, 0.0, method)


@dataclass(frozen=True)
class SampleDraw:
    indices: np.ndarray
    pi_values: np.ndarray
    plan_id: str = ""

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @classmethod
    def from_plan(cls, plan: SamplingPlan, indices) -> "SampleDraw":
        """Wrap explicit indices (e.g. a full enumeration) with the plan's probabilities."""
        indices = np.asarray(indices, dtype=np.int64)
        return cls(indices, plan.probs[indices], plan.method)


def apply_floor(raw_scores, beta: float) -> np.ndarray:
    """Normalize non-negative scores and mix in ``beta`` of the uniform distribution."""
    s = np.asarray(raw_scores, dtype=np.float64)
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"floor beta must lie in [0, 1), got {beta}")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("raw scores must be finite and non-negative")
    total = s.sum()
    if not total > 0:
        raise DegeneratePlan("all raw sampling scores are zero")
    N = s.shape[0]
    return (1.0 - beta) * (s / total) + beta / N


def _plan_from_scores(scores, beta, method, fallback):
    try:
        probs = apply_floor(scores, beta)
    except DegeneratePlan:
        if not fallback:
            raise
        return uniform_plan(len(scores))
    return SamplingPlan(probs, beta, method)


def uniform_plan(N: int) -> SamplingPlan:
    if N < 1:
        raise ValueError("N must be at least 1")
    return SamplingPlan(np.full(N, 1.0 / N), 0.0, Method.UNIF.value)


def leverage_scores(data: Dataset) -> np.ndarray:
    """Statistical leverages h_ii = x_i^T (X^T X)^{-1} x_i."""
    X, _ = design(data)
    Q, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * diag.max():
        raise SingularGram("X^T X is rank-deficient")
    return np.einsum("ij,ij->i", Q, Q)


def leverage_plan(data: Dataset, beta: float = DEFAULT_FLOOR) -> SamplingPlan:
    return SamplingPlan(apply_floor(leverage_scores(data), beta), beta, Method.LEV.value)


@dataclass(frozen=True)
class Pilot:
    theta0: np.ndarray
    sigma0: np.ndarray
    pilot_indices: np.ndarray

    @property
    def n0(self) -> int:
        return self.pilot_indices.shape[0]

    def factor(self):
        try:
            return linalg.cho_factor(self.sigma0, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise SingularHessian("pilot Hessian is not positive definite") from exc


def default_pilot_size(n: int, d: int) -> int:
    return min(n, max(PILOT_MIN, 20 * d))


def fit_pilot_on(model: LossModel, data: Dataset, indices) -> Pilot:
    """Solve the unweighted risk over the given rows and keep its Hessian."""
    indices = np.asarray(indices, dtype=np.int64)
    sol = solve_pilot(model, data, indices).require_converged()
    pilot = Pilot(sol.theta, sol.final_hess, indices)
    pilot.factor()
    return pilot


def fit_pilot(model: LossModel, data: Dataset, n0: int, rng: np.random.Generator) -> Pilot:
    """Fit a pilot on ``n0`` rows drawn uniformly without replacement."""
    if n0 < data.d:
        raise ValueError(f"pilot size {n0} is below the dimension {data.d}")
    n0 = min(n0, data.N)
    idx = np.sort(rng.choice(data.N, size=n0, replace=False))
    return fit_pilot_on(model, data, idx)


def gradient_scores(model, data, pilot: Pilot) -> np.ndarray:
    X, _ = design(data)
    r = link_derivatives(model, data, pilot.theta0)
    return np.abs(r) * np.sqrt(np.einsum("ij,ij->i", X, X))


def hessian_scores(model, data, pilot: Pilot) -> np.ndarray:
    """Norms ||sigma0^{-1} grad f(theta0; x_i)||, one Cholesky shared by all rows.

    Each gradient is r_i x_i, so the norm is |r_i| ||sigma0^{-1} x_i||.
    """
    c = pilot.factor()
    inv = linalg.cho_solve(c, np.eye(pilot.sigma0.shape[0]), check_finite=False)
    inv = 0.5 * (inv + inv.T)
    X, _ = design(data)
    D = X @ inv
    r = link_derivatives(model, data, pilot.theta0)
    return np.abs(r) * np.sqrt(np.einsum("ij,ij->i", D, D))


def gradient_plan(model, data, pilot, beta=DEFAULT_FLOOR, fallback=False) -> SamplingPlan:
    return _plan_from_scores(gradient_scores(model, data, pilot), beta, Method.GRAD.value, fallback)


def hessian_plan(model, data, pilot, beta=DEFAULT_FLOOR, fallback=False) -> SamplingPlan:
    return _plan_from_scores(hessian_scores(model, data, pilot), beta, Method.HESSIAN.value, fallback)


def build_plan(method: Method, model, data, beta=DEFAULT_FLOOR, pilot: Optional[Pilot] = None,
               fallback=False) -> SamplingPlan:
    method = Method(method)
    if method is Method.UNIF:
        return uniform_plan(data.N)
    if method is Method.LEV:
        return leverage_plan(data, beta)
    if pilot is None:
        raise ValueError(f"{method.value} sampling needs a pilot")
    if method is Method.GRAD:
        return gradient_plan(model, data, pilot, beta, fallback)
    return hessian_plan(model, data, pilot, beta, fallback)


def draw(plan: SamplingPlan, n: int, rng: np.random.Generator) -> SampleDraw:
    """n independent draws with replacement from ``plan``."""
    if n < 1:
        raise ValueError("draw size must be at least 1")
    idx = plan.table.sample(n, rng)
    return SampleDraw(idx, plan.probs[idx], plan.method)
