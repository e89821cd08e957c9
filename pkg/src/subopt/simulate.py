"""Synthetic data generators and the seeded Monte Carlo engine.

Replication ``r`` of method ``m`` at fraction index ``f`` draws all of its
randomness (pilot rows, subsample) from
``SeedSequence([master_seed, m, f, 0, r])``, so a report does not depend on
how replications are scheduled across worker processes.
"""
from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import sampling
from .core import Dataset, LossModel, sigmoid
from .errors import DegeneratePlan, NoConvergence, SingularHessian
from .sampling import Method
from .solver import solve_full, solve_subsample_equal, solve_subsample_weighted
from .uncertainty import amse, chi2_quantile, ci_statistic, empirical_mse, mse_estimate

THETA_TRUE = (1.0, 1.0, 1.0, 0.1, 0.1)
NOISE_VARIANCE = 10.0
LOGISTIC_VARIANCES = (1.0, 1.0, 1.0, 5.0, 5.0)
DEFAULT_FRACTIONS = (0.005, 0.01, 0.02, 0.04, 0.08)
DEFAULT_LEVELS = (0.90, 0.95)
PILOT_CAP = 2000
CHUNK = 50


class GeneratorKind(enum.Enum):
    LINEAR_AR = "linear"
    LOGISTIC_DIAG = "logistic"


class Weighting(enum.Enum):
    IPW = "ipw"
    EQUAL = "equal"


@dataclass(frozen=True)
class GeneratorSpec:
    kind: GeneratorKind = GeneratorKind.LINEAR_AR
    N: int = 100_000
    delta: float = 0.0
    seed: int = 0
    theta_true: Tuple[float, ...] = THETA_TRUE

    def __post_init__(self):
        object.__setattr__(self, "kind", GeneratorKind(self.kind))
        object.__setattr__(self, "theta_true", tuple(float(t) for t in self.theta_true))
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    @property
    def model(self) -> LossModel:
        return LossModel.from_name(self.kind.value, len(self.theta_true) + 1)

    @property
    def theta_fitted_truth(self) -> np.ndarray:
        """Coefficients of the fitted model (intercept 0 first) under delta = 0."""
        return np.concatenate([[0.0], self.theta_true])


def ar1_covariance(p: int = 5, rho: float = 0.5) -> np.ndarray:
    i = np.arange(p)
    return rho ** np.abs(i[:, None] - i[None, :])


def linear_covariates(rng: np.random.Generator, N: int, p: int = 5):
    """Rows from N(0, S) w.p. 3/4 and N(0, 4S) w.p. 1/4, S_ij = 0.5^|i-j|.

    Returns the covariates and the boolean mask of rows from the 4S component.
    """
    heavy = rng.random(N) < 0.25
    L = np.linalg.cholesky(ar1_covariance(p))
    Z = rng.standard_normal((N, p)) @ L.T
    Z[heavy] *= 2.0
    return Z, heavy


def _with_intercept(Z):
    return np.column_stack([np.ones(Z.shape[0]), Z])


def generate_linear(spec: GeneratorSpec, rng: Optional[np.random.Generator] = None) -> Dataset:
    if spec.kind is not GeneratorKind.LINEAR_AR:
        raise ValueError("generate_linear needs a linear generator spec")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    theta = np.asarray(spec.theta_true)
    Z, _ = linear_covariates(rng, spec.N, theta.shape[0])
    eps = rng.standard_normal(spec.N) * math.sqrt(NOISE_VARIANCE)
    y = Z @ theta + (1.0 + spec.delta * np.abs(Z[:, 0])) * eps
    return Dataset(_with_intercept(Z), y)


def generate_logistic(spec: GeneratorSpec, rng: Optional[np.random.Generator] = None) -> Dataset:
    if spec.kind is not GeneratorKind.LOGISTIC_DIAG:
        raise ValueError("generate_logistic needs a logistic generator spec")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    theta = np.asarray(spec.theta_true)
    p = theta.shape[0]
    sd = np.sqrt(np.resize(np.asarray(LOGISTIC_VARIANCES), p))
    Z = rng.standard_normal((spec.N, p)) * sd
    # the extra covariate only enters the generating model
    extra = rng.standard_normal(spec.N)
    eta = Z @ theta + spec.delta * extra ** 2
    y = (rng.random(spec.N) < sigmoid(eta)).astype(np.float64)
    return Dataset(_with_intercept(Z), y)


def generate(spec: GeneratorSpec, rng=None) -> Dataset:
    if spec.kind is GeneratorKind.LINEAR_AR:
        return generate_linear(spec, rng)
    return generate_logistic(spec, rng)


# --- experiment configuration -------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS
    replications: int = 1000
    methods: Tuple[Method, ...] = tuple(Method)
    weightings: Tuple[Weighting, ...] = (Weighting.IPW,)
    confidence_levels: Tuple[float, ...] = DEFAULT_LEVELS
    master_seed: int = 0
    beta: float = sampling.DEFAULT_FLOOR
    pilot_cap: int = PILOT_CAP

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "weightings", tuple(Weighting(w) for w in self.weightings))
        object.__setattr__(self, "confidence_levels", tuple(float(q) for q in self.confidence_levels))
        if not self.fractions or any(not 0.0 < f < 1.0 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1)")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if Weighting.IPW not in self.weightings:
            raise ValueError("the IPW weighting is always computed; include it")
        if any(not 0.0 < q < 1.0 for q in self.confidence_levels):
            raise ValueError("confidence levels must lie in (0, 1)")

    def draw_size(self, fraction: float) -> int:
        return max(1, int(round(fraction * self.generator.N)))

    def to_mapping(self) -> Dict[str, str]:
        g = self.generator
        return {
            "model": g.kind.value,
            "N": str(g.N),
            "delta": repr(g.delta),
            "data_seed": str(g.seed),
            "theta_true": ",".join(repr(t) for t in g.theta_true),
            "fractions": ",".join(repr(f) for f in self.fractions),
            "replications": str(self.replications),
            "methods": ",".join(m.value for m in self.methods),
            "weightings": ",".join(w.value for w in self.weightings),
            "confidence_levels": ",".join(repr(q) for q in self.confidence_levels),
            "master_seed": str(self.master_seed),
            "floor_beta": repr(self.beta),
            "pilot_cap": str(self.pilot_cap),
        }

    @classmethod
    def from_mapping(cls, m: Dict[str, str]) -> "ExperimentConfig":
        known = {"model", "N", "delta", "data_seed", "theta_true", "fractions", "replications",
                 "methods", "weightings", "confidence_levels", "master_seed", "floor_beta",
                 "pilot_cap"}
        unknown = set(m) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")

        def floats(s):
            return tuple(float(v) for v in s.split(",") if v.strip())

        seed = int(m.get("master_seed", 0))
        gen = GeneratorSpec(
            kind=GeneratorKind(m.get("model", "linear")),
            N=int(m.get("N", 100_000)),
            delta=float(m.get("delta", 0.0)),
            seed=int(m.get("data_seed", seed)),
            theta_true=floats(m["theta_true"]) if "theta_true" in m else THETA_TRUE,
        )
        kw = {}
        if "fractions" in m:
            kw["fractions"] = floats(m["fractions"])
        if "replications" in m:
            kw["replications"] = int(m["replications"])
        if "methods" in m:
            kw["methods"] = tuple(Method(v.strip().lower()) for v in m["methods"].split(","))
        if "weightings" in m:
            kw["weightings"] = tuple(Weighting(v.strip().lower()) for v in m["weightings"].split(","))
        if "confidence_levels" in m:
            kw["confidence_levels"] = floats(m["confidence_levels"])
        if "floor_beta" in m:
            kw["beta"] = float(m["floor_beta"])
        if "pilot_cap" in m:
            kw["pilot_cap"] = int(m["pilot_cap"])
        return cls(generator=gen, master_seed=seed, **kw)


def preset(name: str, master_seed: int = 0, replications: int = 1000, N: int = 100_000) -> List[ExperimentConfig]:
    """Experiment configurations of the simulation study.

    ``paper-linear`` / ``paper-logistic`` are the main study (LEV is left out
    of the logistic one); ``appendix-e`` compares IPW and equal weighting on
    misspecified generators with delta in {0, 0.5, 1}.
    """
    lin = GeneratorSpec(GeneratorKind.LINEAR_AR, N, 0.0, master_seed)
    logi = GeneratorSpec(GeneratorKind.LOGISTIC_DIAG, N, 0.0, master_seed)
    common = dict(replications=replications, master_seed=master_seed)
    if name == "paper-linear":
        return [ExperimentConfig(lin, methods=tuple(Method), **common)]
    if name == "paper-logistic":
        return [ExperimentConfig(logi, methods=(Method.UNIF, Method.GRAD, Method.HESSIAN), **common)]
    if name == "appendix-e":
        both = (Weighting.IPW, Weighting.EQUAL)
        out = []
        for delta in (0.0, 0.5, 1.0):
            out.append(ExperimentConfig(replace(lin, delta=delta), weightings=both,
                                        methods=(Method.LEV, Method.GRAD, Method.HESSIAN), **common))
        for delta in (0.0, 0.5, 1.0):
            out.append(ExperimentConfig(replace(logi, delta=delta), weightings=both,
                                        methods=(Method.GRAD, Method.HESSIAN), **common))
        return out
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("paper-linear", "paper-logistic", "appendix-e")


# --- single replication -------------------------------------------------------

@dataclass
class ReplicationRecord:
    method: Method
    fraction: float
    n: int
    rep: int = 0
    deviation: Optional[np.ndarray] = None
    mse_hat_trace: Optional[float] = None
    covered: Tuple[bool, ...] = ()
    equal_deviation: Optional[np.ndarray] = None
    flag: Optional[str] = None
    equal_flag: Optional[str] = None


def replication_seed(master_seed: int, method: Method, fraction_index: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, Method(method).stream_id, fraction_index, 0, rep])


def reference_seed(master_seed: int, method: Method, fraction_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, Method(method).stream_id, fraction_index, 1, 0])


def _flag_of(exc) -> str:
    if isinstance(exc, SingularHessian):
        return "singular"
    if isinstance(exc, DegeneratePlan):
        return "degenerate"
    return "noconv"


def pilot_size(n: int, d: int, cap: int = PILOT_CAP) -> int:
    return max(d, min(n, cap))


def make_plan(model, data, method, rng, n, beta, pilot_cap=PILOT_CAP):
    """Plan for one replication; GRAD/Hessian refit a uniform pilot from ``rng``."""
    method = Method(method)
    pilot = None
    if method.needs_pilot:
        pilot = sampling.fit_pilot(model, data, pilot_size(n, data.d, pilot_cap), rng)
    return sampling.build_plan(method, model, data, beta, pilot)


def run_replication(model, data, theta_N, method, fraction, rep_rng, *,
                    weightings=(Weighting.IPW,), levels=DEFAULT_LEVELS,
                    beta=sampling.DEFAULT_FLOOR, pilot_cap=PILOT_CAP,
                    plan=None, n=None, rep=0) -> ReplicationRecord:
    """One Monte Carlo replication: plan, draw, solve, estimate, check coverage.

    Failures (singular subsample Hessian, non-convergence, degenerate plan)
    are stored as flags on the record instead of propagating.
    """
    method = Method(method)
    n = max(1, int(round(fraction * data.N))) if n is None else n
    rec = ReplicationRecord(method, fraction, n, rep)
    try:
        if plan is None:
            plan = make_plan(model, data, method, rep_rng, n, beta, pilot_cap)
        drawn = sampling.draw(plan, n, rep_rng)
    except (SingularHessian, DegeneratePlan, NoConvergence) as exc:
        rec.flag = rec.equal_flag = _flag_of(exc)
        return rec

    try:
        sol = solve_subsample_weighted(model, data, drawn)
        if not sol.converged:
            rec.flag = "noconv"
        else:
            rec.deviation = sol.theta - theta_N
            est = mse_estimate(model, data, drawn, sol.theta)
            rec.mse_hat_trace = est.trace
            stat = ci_statistic(sol.theta, theta_N, est)
            rec.covered = tuple(stat <= chi2_quantile(data.d, q) for q in levels)
    except SingularHessian:
        rec.flag = "singular"
        rec.deviation = None

    if Weighting.EQUAL in tuple(Weighting(w) for w in weightings):
        try:
            eq = solve_subsample_equal(model, data, drawn)
            if eq.converged:
                rec.equal_deviation = eq.theta - theta_N
            else:
                rec.equal_flag = "noconv"
        except SingularHessian:
            rec.equal_flag = "singular"
    return rec


# --- experiment ---------------------------------------------------------------

@dataclass
class CellSummary:
    method: Method
    fraction: float
    n: int
    replications: int
    emp_mse: Optional[np.ndarray]
    trace_emp_mse: float
    amse_trace: float
    amse_ratio: float
    msehat_ratio: float
    coverage: Dict[float, float]
    flagged: Dict[str, int]
    equal_emp_mse: Optional[np.ndarray] = None
    trace_equal_emp_mse: float = float("nan")
    equal_ipw_ratio: float = float("nan")
    equal_flagged: int = 0

    @property
    def n_flagged(self) -> int:
        return sum(self.flagged.values())


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    theta_N: np.ndarray
    cells: List[CellSummary]
    slopes: Dict[Method, Tuple[float, float]] = field(default_factory=dict)

    def cell(self, method, fraction) -> CellSummary:
        method = Method(method)
        for c in self.cells:
            if c.method is method and math.isclose(c.fraction, fraction):
                return c
        raise KeyError((method, fraction))

    def method_cells(self, method) -> List[CellSummary]:
        method = Method(method)
        return sorted((c for c in self.cells if c.method is method), key=lambda c: c.n)


def loglog_fit(ns, traces) -> Tuple[float, float]:
    """OLS slope and R^2 of log(trace) against log(n)."""
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(traces, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("need at least two fractions for a slope")
    xc, yc = x - x.mean(), y - y.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ yc) / sxx
    ss_tot = float(yc @ yc)
    resid = yc - slope * xc
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return slope, r2


def mse_slope(report: ExperimentReport, method) -> float:
    cells = report.method_cells(method)
    return loglog_fit([c.n for c in cells], [c.trace_emp_mse for c in cells])[0]


# worker-process state, set once per process by _init_worker
_STATE: dict = {}


def _init_worker(model, data, theta_N, fixed_plans, config):
    _STATE.update(model=model, data=data, theta_N=theta_N, plans=fixed_plans, config=config)


def _run_chunk(task):
    method, fi, reps = task
    s = _STATE
    cfg: ExperimentConfig = s["config"]
    fraction = cfg.fractions[fi]
    n = cfg.draw_size(fraction)
    out = []
    with threadpool_limits(1):
        for r in reps:
            rng = np.random.default_rng(replication_seed(cfg.master_seed, method, fi, r))
            out.append(run_replication(
                s["model"], s["data"], s["theta_N"], method, fraction, rng,
                weightings=cfg.weightings, levels=cfg.confidence_levels, beta=cfg.beta,
                pilot_cap=cfg.pilot_cap, plan=s["plans"].get(method), n=n, rep=r))
    return out


def _summarize(cfg, model, data, theta_N, method, fi, records, ref_plan) -> CellSummary:
    fraction = cfg.fractions[fi]
    n = cfg.draw_size(fraction)
    ok = [r for r in records if r.flag is None]
    flagged: Dict[str, int] = {}
    for r in records:
        if r.flag is not None:
            flagged[r.flag] = flagged.get(r.flag, 0) + 1
    nan = float("nan")
    if ok:
        emp = empirical_mse(np.array([r.deviation for r in ok]))
        tr = float(np.trace(emp))
        msehat = float(np.mean([r.mse_hat_trace for r in ok])) / tr
        coverage = {q: float(np.mean([r.covered[k] for r in ok]))
                    for k, q in enumerate(cfg.confidence_levels)}
    else:
        emp, tr, msehat = None, nan, nan
        coverage = {q: nan for q in cfg.confidence_levels}
    try:
        a_tr = nan if ref_plan is None else amse(model, data, ref_plan, theta_N, n).trace
    except SingularHessian:
        a_tr = nan
    cell = CellSummary(method, fraction, n, len(records), emp, tr, a_tr, a_tr / tr, msehat,
                       coverage, flagged)
    if Weighting.EQUAL in cfg.weightings:
        eq = [r for r in records if r.equal_flag is None and r.equal_deviation is not None]
        cell.equal_flagged = len(records) - len(eq)
        if eq:
            cell.equal_emp_mse = empirical_mse(np.array([r.equal_deviation for r in eq]))
            cell.trace_equal_emp_mse = float(np.trace(cell.equal_emp_mse))
            cell.equal_ipw_ratio = cell.trace_equal_emp_mse / tr
    return cell


def run_experiment(config: ExperimentConfig, threads: int = 1, data: Optional[Dataset] = None) -> ExperimentReport:
    """Run every (method, fraction) cell of ``config`` and aggregate.

    ``threads`` sets the number of worker processes; results are identical for
    any value because each replication owns its random stream and records are
    reduced in replication order.
    """
    cfg = config
    model = cfg.generator.model
    data = generate(cfg.generator) if data is None else data
    model = LossModel(model.kind, data.d)
    with threadpool_limits(1):
        theta_N = solve_full(model, data).require_converged().theta
        fixed = {}
        for m in cfg.methods:
            if m is Method.UNIF:
                fixed[m] = sampling.uniform_plan(data.N)
            elif m is Method.LEV:
                fixed[m] = sampling.leverage_plan(data, cfg.beta)

    tasks = []
    for m in cfg.methods:
        for fi in range(len(cfg.fractions)):
            for start in range(0, cfg.replications, CHUNK):
                tasks.append((m, fi, range(start, min(start + CHUNK, cfg.replications))))

    init = (model, data, theta_N, fixed, cfg)
    if threads <= 1:
        _init_worker(*init)
        results = [_run_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=init) as ex:
            results = list(ex.map(_run_chunk, tasks))

    by_cell: Dict[Tuple[Method, int], List[ReplicationRecord]] = {}
    for t, recs in zip(tasks, results):
        by_cell.setdefault((t[0], t[1]), []).extend(recs)

    cells = []
    with threadpool_limits(1):
        for m in cfg.methods:
            for fi, fraction in enumerate(cfg.fractions):
                if m in fixed:
                    ref_plan = fixed[m]
                else:
                    rng = np.random.default_rng(reference_seed(cfg.master_seed, m, fi))
                    try:
                        ref_plan = make_plan(model, data, m, rng, cfg.draw_size(fraction), cfg.beta,
                                             cfg.pilot_cap)
                    except (SingularHessian, DegeneratePlan, NoConvergence):
                        ref_plan = None
                cells.append(_summarize(cfg, model, data, theta_N, m, fi, by_cell[(m, fi)], ref_plan))
    report = ExperimentReport(cfg, theta_N, cells)
    if len(cfg.fractions) >= 2:
        for m in cfg.methods:
            mc = report.method_cells(m)
            if all(np.isfinite(c.trace_emp_mse) and c.trace_emp_mse > 0 for c in mc):
                report.slopes[m] = loglog_fit([c.n for c in mc], [c.trace_emp_mse for c in mc])
    return report


# --- CSV output ---------------------------------------------------------------

REPORT_COLUMNS = ["model", "method", "weighting", "fraction", "n", "trace_emp_mse", "amse_ratio",
                  "msehat_ratio", "cover90", "cover95", "equal_ipw_ratio", "flagged", "delta"]
SLOPE_COLUMNS = ["model", "method", "slope", "r_squared", "delta"]
POINT_COLUMNS = ["model", "method", "weighting", "fraction", "n", "log_n", "log_trace_emp_mse", "delta"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _coverage_at(cell, q):
    for level, v in cell.coverage.items():
        if math.isclose(level, q):
            return v
    return None


def report_rows(report: ExperimentReport) -> List[List[str]]:
    cfg = report.config
    model = cfg.generator.kind.value
    delta = cfg.generator.delta
    rows = []
    for c in report.cells:
        rows.append([model, c.method.value, "ipw", c.fraction, c.n, c.trace_emp_mse, c.amse_ratio,
                     c.msehat_ratio, _coverage_at(c, 0.90), _coverage_at(c, 0.95),
                     c.equal_ipw_ratio, c.n_flagged, delta])
        if Weighting.EQUAL in cfg.weightings:
            rows.append([model, c.method.value, "equal", c.fraction, c.n, c.trace_equal_emp_mse,
                         None, None, None, None, c.equal_ipw_ratio, c.equal_flagged, delta])
    return [[_fmt(v) for v in r] for r in rows]


def slope_rows(report: ExperimentReport) -> List[List[str]]:
    cfg = report.config
    return [[_fmt(v) for v in (cfg.generator.kind.value, m.value, s, r2, cfg.generator.delta)]
            for m, (s, r2) in report.slopes.items()]


def point_rows(report: ExperimentReport) -> List[List[str]]:
    cfg = report.config
    out = []
    for c in report.cells:
        if np.isfinite(c.trace_emp_mse) and c.trace_emp_mse > 0:
            out.append([cfg.generator.kind.value, c.method.value, "ipw", c.fraction, c.n,
                        math.log(c.n), math.log(c.trace_emp_mse), cfg.generator.delta])
    return [[_fmt(v) for v in r] for r in out]


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
