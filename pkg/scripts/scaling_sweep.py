"""Length and model-size sweeps on the desk benchmark, with power-law fits.

    python scripts/scaling_sweep.py --out runs/scaling [--seeds 0 1 2] [--axis length model_size]
"""
import argparse
from pathlib import Path

from suan import experiments as X
from suan.scaling import write_fit_json, write_plot_csv, write_points_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/scaling")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(X.SEEDS))
    ap.add_argument("--axis", nargs="+", default=["length", "model_size"], choices=["length", "model_size"])
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = X.desk_data()
    cache = {}
    for axis in args.axis:
        sweep = (X.length_sweep if axis == "length" else X.size_sweep)(data, args.seeds, cache)
        fit = X.fit_sweep(sweep)
        write_points_csv(out / f"{axis}_points.csv", sweep.points)
        write_points_csv(out / f"{axis}_runs.csv", sweep.runs)
        write_fit_json(out / f"{axis}_fit.json", fit)
        write_plot_csv(out / f"{axis}_plot.csv", sweep.points, fit)
        for p in sweep.points:
            print(f"{axis} {p.meta['rung']} x={p.x:g} auc={p.auc:.4f}")
        coef = " ".join(f"{k}={v:.4g}" for k, v in fit.form.coef.items())
        print(f"{fit.form.family}-form {coef} R2={fit.r2:.4f} ({sweep.seconds:.0f}s)")


if __name__ == "__main__":
    main()
