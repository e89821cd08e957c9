"""Run a simulation preset and print its summary tables.

    python3 scripts/run_study.py --preset paper-linear --reps 1000 --out-dir results/linear

Writes report.csv, slopes.csv and points.csv (same format as
``subopt experiment``) and prints one table per summary quantity with
methods as rows and sampling fractions as columns.
"""
import argparse
import os
import time
from pathlib import Path

from subopt import simulate

TABLES = [
    ("trace(AMSE) / trace(empirical MSE)", "amse_ratio", "{:.3f}"),
    ("mean trace(mse-hat) / trace(empirical MSE)", "msehat_ratio", "{:.3f}"),
    ("coverage at 0.90", "cover90", "{:.3f}"),
    ("coverage at 0.95", "cover95", "{:.3f}"),
    ("trace(empirical MSE)", "trace_emp_mse", "{:.3e}"),
]


def _table(report, title, key, fmt):
    cfg = report.config
    g = cfg.generator
    print(f"\n{title}  [{g.kind.value}, delta={g.delta:g}, {cfg.replications} reps]")
    print(f"{'method':<9}" + "".join(f"{f:>10g}" for f in cfg.fractions))
    for m in cfg.methods:
        cells = [report.cell(m, f) for f in cfg.fractions]
        if key in ("cover90", "cover95"):
            vals = [c.coverage.get(0.9 if key == "cover90" else 0.95, float("nan")) for c in cells]
        else:
            vals = [getattr(c, key) for c in cells]
        print(f"{m.label:<9}" + "".join(f"{fmt.format(v):>10}" for v in vals))


def _weighting_table(report):
    cfg = report.config
    print(f"\nequal / IPW trace ratio  [{cfg.generator.kind.value}, "
          f"delta={cfg.generator.delta:g}]")
    print(f"{'method':<9}" + "".join(f"{f:>10g}" for f in cfg.fractions))
    for m in cfg.methods:
        vals = [report.cell(m, f).equal_ipw_ratio for f in cfg.fractions]
        print(f"{m.label:<9}" + "".join(f"{v:>10.3f}" for v in vals))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--preset", choices=simulate.PRESETS, default="paper-linear")
    ap.add_argument("--reps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--N", type=int, default=100_000)
    ap.add_argument("--threads", type=int, default=int(os.environ.get("SUBOPT_THREADS", "1")))
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, slopes, points = [], [], []
    for cfg in simulate.preset(args.preset, master_seed=args.seed, replications=args.reps, N=args.N):
        t0 = time.perf_counter()
        report = simulate.run_experiment(cfg, threads=args.threads)
        rows += simulate.report_rows(report)
        slopes += simulate.slope_rows(report)
        points += simulate.point_rows(report)
        if simulate.Weighting.EQUAL in cfg.weightings:
            _weighting_table(report)
        else:
            for title, key, fmt in TABLES:
                _table(report, title, key, fmt)
            print("\nlog-log slopes: " + ", ".join(
                f"{m.label} {s:.3f} (R^2 {r2:.3f})" for m, (s, r2) in report.slopes.items()))
        print(f"[{time.perf_counter() - t0:.1f}s]")

    simulate.write_csv(out / "report.csv", simulate.REPORT_COLUMNS, rows)
    simulate.write_csv(out / "slopes.csv", simulate.SLOPE_COLUMNS, slopes)
    simulate.write_csv(out / "points.csv", simulate.POINT_COLUMNS, points)
    print(f"\nCSV files written to {out}/")


if __name__ == "__main__":
    main()
