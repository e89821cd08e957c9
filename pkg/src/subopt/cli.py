"""Command-line interface: ``subopt <command> [options]``.

Exit codes: 0 success, 1 replay mismatch, 2 usage error, 3 I/O error,
4 singular Hessian / Gram matrix or degenerate plan, 5 Newton non-convergence.

Every command writes a JSON run manifest before producing results;
``subopt replay MANIFEST`` re-executes the recorded command line and checks
the output hashes.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__, sampling, simulate
from .core import Dataset, LossModel
from .errors import DegeneratePlan, NoConvergence, SingularGram, SingularHessian
from .sampling import Method, SamplingPlan
from .solver import solve_full, solve_subsample_equal, solve_subsample_weighted
from .uncertainty import ConfidenceSpec, amse, chi2_quantile, ci_statistic, mse_estimate

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_IO, EXIT_SINGULAR, EXIT_NOCONV = 0, 1, 2, 3, 4, 5
THREADS_ENV = "SUBOPT_THREADS"


class UsageError(Exception):
    pass


# --- run manifest -------------------------------------------------------------

class Manifest:
    def __init__(self, path: Path, argv: List[str], config, master_seed, outputs: List[Path]):
        self.path = path
        self.outputs = outputs
        self.t0 = time.perf_counter()
        self.body = {
            "command": list(argv),
            "cwd": os.getcwd(),
            "config": config,
            "master_seed": master_seed,
            "code_version": __version__,
            "outputs": [str(p) for p in outputs],
            "started_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "wall_clock_seconds": None,
            "output_sha256": {},
        }
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.body, indent=2, sort_keys=True, default=_json_default)
                             + "\n")

    def finish(self):
        self.body["wall_clock_seconds"] = round(time.perf_counter() - self.t0, 3)
        self.body["output_sha256"] = {str(p): _sha256(p) for p in self.outputs if p.exists()}
        self._write()


def _json_default(obj):
    return getattr(obj, "value", str(obj))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


def _jsonable(ns: argparse.Namespace) -> Dict:
    return {k: v for k, v in sorted(vars(ns).items()) if k != "handler"}


# --- argument helpers -----------------------------------------------------------

def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _level(text: str) -> float:
    q = float(text)
    if not 0.0 < q < 1.0:
        raise argparse.ArgumentTypeError("confidence level must lie in (0, 1)")
    return q


def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get(THREADS_ENV, "1")
    try:
        t = int(raw)
    except ValueError as exc:
        raise UsageError(f"invalid thread count {raw!r}") from exc
    if t < 1:
        raise UsageError("thread count must be at least 1")
    return t


def _load_data(args) -> Dataset:
    return Dataset.from_csv(args.data, has_response=not args.no_response)


def _load_model(args, data: Dataset) -> LossModel:
    model = LossModel.from_name(args.model, data.d)
    model.check(data)
    return model


def _draw_size(args, N: int) -> int:
    if args.n is not None:
        n = args.n
    elif args.fraction is not None:
        n = max(1, int(round(args.fraction * N)))
    else:
        return N
    if n < 1:
        raise UsageError("draw size must be at least 1")
    return n


def _build_plan(args, model, data, n, rng) -> SamplingPlan:
    if getattr(args, "plan", None):
        plan = SamplingPlan.from_csv(args.plan)
        if plan.probs.shape[0] != data.N:
            raise UsageError(f"plan has {plan.probs.shape[0]} rows but the data has {data.N}")
        return plan
    method = Method(args.sampler)
    pilot = None
    if method.needs_pilot:
        n0 = args.pilot_size if args.pilot_size is not None else max(
            data.d, sampling.default_pilot_size(n, data.d))
        pilot = sampling.fit_pilot(model, data, n0, rng)
    return sampling.build_plan(method, model, data, args.floor_beta, pilot)


def _emit(record: Dict, fmt: str, out: Optional[str]):
    if fmt == "json":
        text = json.dumps(record) + "\n"
    else:
        lines = ["key,value"]
        for k, v in record.items():
            if isinstance(v, list):
                lines += [f"{k}_{i},{x!r}" for i, x in enumerate(np.ravel(v).tolist())]
            else:
                lines.append(f"{k},{v!r}" if isinstance(v, float) else f"{k},{v}")
        text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --- commands -------------------------------------------------------------------

def cmd_generate(args, argv) -> int:
    theta = tuple(args.theta) if args.theta else simulate.THETA_TRUE
    spec = simulate.GeneratorSpec(simulate.GeneratorKind(args.model), args.n, args.delta, args.seed,
                                  theta)
    out = Path(args.out)
    truth = out.with_name(out.name + ".truth.json")
    man = Manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), argv,
                   _jsonable(args), args.seed, [out, truth])
    data = simulate.generate(spec)
    data.to_csv(out)
    truth.write_text(json.dumps({
        "model": spec.kind.value, "N": spec.N, "delta": spec.delta, "seed": spec.seed,
        "theta_true": list(spec.theta_true),
        "theta_fitted_truth": spec.theta_fitted_truth.tolist(),
        "columns": ["intercept"] + [f"x{i + 1}" for i in range(len(theta))] + ["y"],
    }, indent=2) + "\n")
    man.finish()
    print(f"wrote {out} ({data.N} rows, {data.d + 1} columns) and {truth}")
    return EXIT_OK


def cmd_fit(args, argv) -> int:
    outputs = [Path(args.out)] if args.out else []
    default = outputs[0].with_name(outputs[0].name + ".manifest.json") if outputs else Path(
        "run_manifest.json")
    man = Manifest(_manifest_path(args, default), argv, _jsonable(args), args.seed, outputs)
    if args.ci is not None and args.mode != "weighted":
        raise UsageError("--ci needs --mode weighted (the MSE estimate is for IPW fits)")
    data = _load_data(args)
    model = _load_model(args, data)
    kw = dict(tol_grad=args.tol, max_iter=args.max_iter)
    record = {"mode": args.mode, "model": model.name, "N": data.N, "d": data.d}

    if args.mode == "full":
        sol = solve_full(model, data, **kw).require_converged()
        record["n"] = data.N
    else:
        rng = np.random.default_rng(args.seed)
        n = _draw_size(args, data.N)
        plan = _build_plan(args, model, data, n, rng)
        drawn = sampling.draw(plan, n, rng)
        solver = solve_subsample_weighted if args.mode == "weighted" else solve_subsample_equal
        sol = solver(model, data, drawn, **kw).require_converged()
        record.update(n=n, sampler=plan.method, floor_beta=plan.beta)
    record.update(theta=sol.theta.tolist(), grad_norm=sol.grad_norm, iterations=sol.iterations,
                  converged=sol.converged)

    if args.ci is not None:
        if args.candidate is not None:
            cand = np.asarray(args.candidate, dtype=np.float64)
            if cand.shape != (data.d,):
                raise UsageError(f"--candidate needs {data.d} values")
        else:
            cand = solve_full(model, data, **kw).require_converged().theta
        est = mse_estimate(model, data, drawn, sol.theta)
        stat = ci_statistic(sol.theta, cand, est)
        spec = ConfidenceSpec(args.ci, data.d)
        record.update(mse_hat_trace=est.trace, candidate=cand.tolist(), ci_level=args.ci,
                      ci_statistic=stat, ci_threshold=spec.threshold,
                      in_region=bool(stat <= spec.threshold))
    _emit(record, args.format, args.out)
    man.finish()
    return EXIT_OK


def cmd_plan(args, argv) -> int:
    out = Path(args.out)
    man = Manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), argv,
                   _jsonable(args), args.seed, [out])
    data = _load_data(args)
    model = _load_model(args, data)
    n = _draw_size(args, data.N)
    plan = _build_plan(args, model, data, n, np.random.default_rng(args.seed))
    plan.to_csv(out)
    man.finish()
    print(f"wrote {out} ({plan.method}, floor {plan.beta!r}, N={data.N})")
    return EXIT_OK


def cmd_report(args, argv) -> int:
    outputs = [Path(args.out)] if args.out else []
    default = outputs[0].with_name(outputs[0].name + ".manifest.json") if outputs else Path(
        "run_manifest.json")
    man = Manifest(_manifest_path(args, default), argv, _jsonable(args), args.seed, outputs)
    data = _load_data(args)
    model = _load_model(args, data)
    n = _draw_size(args, data.N)
    if n == data.N and args.n is None and args.fraction is None:
        raise UsageError("report needs --n or --fraction")
    theta_N = solve_full(model, data, tol_grad=args.tol, max_iter=args.max_iter).require_converged().theta
    plan = _build_plan(args, model, data, n, np.random.default_rng(args.seed))
    est = amse(model, data, plan, theta_N, n)
    record = {"model": model.name, "N": data.N, "n": n, "sampler": plan.method,
              "floor_beta": plan.beta, "theta_N": theta_N.tolist(), "amse_trace": est.trace,
              "amse_sd": np.sqrt(np.diag(est.matrix)).tolist(), "amse": est.matrix.tolist()}
    for q in args.levels or ():
        record[f"chi2_{q!r}"] = chi2_quantile(data.d, q)
    _emit(record, args.format, args.out)
    man.finish()
    return EXIT_OK


def _read_config_file(path) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _experiment_configs(args) -> List[simulate.ExperimentConfig]:
    if args.preset and args.config:
        raise UsageError("--preset and --config are mutually exclusive")
    if args.preset:
        kw = {}
        if args.reps is not None:
            kw["replications"] = args.reps
        if args.N is not None:
            kw["N"] = args.N
        base = simulate.preset(args.preset, master_seed=args.seed or 0, **kw)
    elif args.config:
        base = [simulate.ExperimentConfig.from_mapping(_read_config_file(args.config))]
    else:
        base = [simulate.ExperimentConfig()]

    out = []
    for cfg in base:
        gen = cfg.generator
        gkw = {}
        if args.model is not None:
            gkw["kind"] = simulate.GeneratorKind(args.model)
        if args.N is not None:
            gkw["N"] = args.N
        if args.delta is not None:
            gkw["delta"] = args.delta
        if args.data_seed is not None:
            gkw["seed"] = args.data_seed
        elif args.seed is not None and not args.preset:
            gkw["seed"] = args.seed
        ckw = {}
        if gkw:
            ckw["generator"] = dataclasses.replace(gen, **gkw)
        for name, attr in (("fractions", "fractions"), ("methods", "methods"),
                           ("weightings", "weightings"), ("levels", "confidence_levels"),
                           ("reps", "replications"), ("seed", "master_seed"),
                           ("floor_beta", "beta"), ("pilot_cap", "pilot_cap")):
            v = getattr(args, name)
            if v is not None:
                ckw[attr] = tuple(v) if isinstance(v, list) else v
        out.append(dataclasses.replace(cfg, **ckw) if ckw else cfg)
    return out


def cmd_experiment(args, argv) -> int:
    threads = _threads(args)
    configs = _experiment_configs(args)
    out_dir = Path(args.out_dir)
    report_path, slopes_path = out_dir / "report.csv", out_dir / "slopes.csv"
    outputs = [report_path, slopes_path]
    points_path = out_dir / "points.csv"
    if args.points:
        outputs.append(points_path)
    man = Manifest(_manifest_path(args, out_dir / "run_manifest.json"), argv,
                   {"args": _jsonable(args), "experiments": [c.to_mapping() for c in configs],
                    "threads": threads},
                   configs[0].master_seed, outputs)
    rows, slopes, points = [], [], []
    for cfg in configs:
        t0 = time.perf_counter()
        report = simulate.run_experiment(cfg, threads=threads)
        rows += simulate.report_rows(report)
        slopes += simulate.slope_rows(report)
        points += simulate.point_rows(report)
        g = cfg.generator
        print(f"{g.kind.value} delta={g.delta!r}: {len(report.cells)} cells, "
              f"{cfg.replications} reps, {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    simulate.write_csv(report_path, simulate.REPORT_COLUMNS, rows)
    simulate.write_csv(slopes_path, simulate.SLOPE_COLUMNS, slopes)
    if args.points:
        simulate.write_csv(points_path, simulate.POINT_COLUMNS, points)
    man.finish()
    print("wrote " + ", ".join(str(p) for p in outputs))
    return EXIT_OK


@contextlib.contextmanager
def _chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_replay(args, argv) -> int:
    body = json.loads(Path(args.manifest_file).read_text())
    expected = body.get("output_sha256", {})
    with _chdir(body["cwd"]):
        code = main(body["command"])
        if code != EXIT_OK:
            return code
        got = {p: _sha256(Path(p)) for p in expected}
    bad = [p for p in expected if got[p] != expected[p]]
    for p in expected:
        print(f"{'ok' if p not in bad else 'MISMATCH'} {p}")
    return EXIT_MISMATCH if bad else EXIT_OK


# --- parser -----------------------------------------------------------------------

def _add_data_args(p):
    p.add_argument("--data", required=True, help="headerless CSV; last column is the response")
    p.add_argument("--model", required=True, choices=["linear", "logistic"],
                   help="squared loss (linear) or logistic loss")
    p.add_argument("--no-response", action="store_true",
                   help="CSV has no response column (mean estimation, linear only)")


def _add_plan_args(p, with_plan_file=True):
    p.add_argument("--sampler", default="hessian", choices=[m.value for m in Method],
                   help="sampling plan (default: hessian)")
    if with_plan_file:
        p.add_argument("--plan", help="use a plan CSV written by 'subopt plan' instead of --sampler")
    p.add_argument("--floor-beta", type=float, default=sampling.DEFAULT_FLOOR,
                   help="uniform mixing weight for lev/grad/hessian plans (default: 0.05)")
    p.add_argument("--pilot-size", type=int, help="pilot rows for grad/hessian "
                   "(default: min(n, max(500, 20 d)), at least d)")
    size = p.add_mutually_exclusive_group()
    size.add_argument("--fraction", type=float, help="draw size as a fraction of N")
    size.add_argument("--n", type=int, help="draw size")
    p.add_argument("--seed", type=int, default=0, help="random seed for pilot and draw")


def _add_solver_args(p):
    p.add_argument("--tol", type=float, default=1e-10, help="relative gradient tolerance")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out", help="write the result here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="run manifest path (default: next to the outputs)")

    ap = argparse.ArgumentParser(prog="subopt", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog="exit codes: 0 ok, 1 replay mismatch, 2 usage, 3 I/O, "
                                        "4 singular, 5 non-convergence")
    ap.add_argument("--version", action="version", version=f"subopt {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset CSV")
    g.add_argument("--model", choices=["linear", "logistic"], default="linear")
    g.add_argument("--n", type=int, default=100_000, help="number of rows N")
    g.add_argument("--delta", type=float, default=0.0, help="misspecification degree")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--theta", type=_floats, help="true coefficients (default: 1,1,1,0.1,0.1)")
    g.add_argument("--out", required=True, help="CSV path; a .truth.json sidecar is written too")
    g.set_defaults(handler=cmd_generate)

    f = sub.add_parser("fit", parents=[common], help="fit on the full data or a subsample")
    _add_data_args(f)
    f.add_argument("--mode", choices=["full", "weighted", "equal"], default="full",
                   help="full data, IPW subsample, or equal-weight subsample")
    _add_plan_args(f)
    f.add_argument("--ci", type=_level, metavar="Q",
                   help="also report the mse-hat trace and the confidence-region statistic")
    f.add_argument("--candidate", type=_floats,
                   help="candidate coefficients tested by --ci (default: full-data fit)")
    _add_solver_args(f)
    f.set_defaults(handler=cmd_fit)

    pl = sub.add_parser("plan", parents=[common], help="write a sampling plan CSV")
    _add_data_args(pl)
    _add_plan_args(pl, with_plan_file=False)
    pl.add_argument("--out", required=True)
    pl.set_defaults(handler=cmd_plan)

    r = sub.add_parser("report", parents=[common],
                       help="asymptotic MSE of the IPW estimator for a plan and draw size")
    _add_data_args(r)
    _add_plan_args(r)
    r.add_argument("--levels", type=_floats, help="also print chi-square thresholds at these levels")
    _add_solver_args(r)
    r.set_defaults(handler=cmd_report)

    e = sub.add_parser("experiment", parents=[common], help="run a Monte Carlo study")
    e.add_argument("--preset", choices=simulate.PRESETS)
    e.add_argument("--config", help="key=value file (keys: " +
                   ", ".join(simulate.ExperimentConfig().to_mapping()) + ")")
    e.add_argument("--model", choices=["linear", "logistic"])
    e.add_argument("--N", type=int, help="population size")
    e.add_argument("--delta", type=float)
    e.add_argument("--data-seed", type=int, help="generator seed (default: --seed)")
    e.add_argument("--fractions", type=_floats)
    e.add_argument("--methods", type=lambda s: [Method(v.strip().lower()) for v in s.split(",")])
    e.add_argument("--weightings",
                   type=lambda s: [simulate.Weighting(v.strip().lower()) for v in s.split(",")])
    e.add_argument("--levels", type=_floats, help="confidence levels")
    e.add_argument("--reps", type=int, help="replications per cell")
    e.add_argument("--seed", type=int, help="master seed")
    e.add_argument("--floor-beta", type=float)
    e.add_argument("--pilot-cap", type=int)
    e.add_argument("--threads", type=int, help=f"worker processes (default: ${THREADS_ENV} or 1)")
    e.add_argument("--out-dir", default=".")
    e.add_argument("--points", action="store_true", help="also write points.csv (log-log points)")
    e.set_defaults(handler=cmd_experiment)

    rp = sub.add_parser("replay", help="re-run a manifest and verify output hashes")
    rp.add_argument("manifest_file")
    rp.set_defaults(handler=cmd_replay, manifest=None)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args, argv)
    except UsageError as exc:
        print(f"subopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularHessian, SingularGram, DegeneratePlan) as exc:
        print(f"subopt: singular: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except NoConvergence as exc:
        print(f"subopt: no convergence: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except OSError as exc:
        print(f"subopt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"subopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
