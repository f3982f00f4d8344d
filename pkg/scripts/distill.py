"""Distilled against plain sparse student on the desk benchmark.

    python scripts/distill.py [--seeds 0 1 2 3 4] [--t 2.0]
"""
import argparse

import numpy as np

from suan import experiments as X


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=list(X.DISTILL_SEEDS))
    ap.add_argument("--t", type=float, default=X.DISTILL_T)
    ap.add_argument("--out", default=None, help="optional JSON dump of per-seed AUCs")
    args = ap.parse_args()

    res = X.distill_comparison(X.desk_data(), args.seeds, t=args.t)
    for s, d, p in zip(args.seeds, res["distilled"], res["plain"]):
        print(f"seed {s}: distilled {d:.4f} plain {p:.4f}")
    print(f"mean: distilled {np.mean(res['distilled']):.4f} plain {np.mean(res['plain']):.4f}")
    if args.out:
        X.save_json(args.out, res)


if __name__ == "__main__":
    main()
