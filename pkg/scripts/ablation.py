"""Variant A-G toggles against the full model on the desk benchmark.

    python scripts/ablation.py [--seeds 0 1 2]
"""
import argparse

import numpy as np

from suan import experiments as X
from suan.model import VARIANTS


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=list(X.SEEDS))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    res = X.ablation(X.desk_data(), args.seeds)
    full = np.mean(res["full"])
    for name, aucs in res.items():
        toggle = ", ".join(f"{k}={v}" for k, v in VARIANTS.get(name, {}).items()) or "-"
        print(f"{name:5s} {toggle:28s} mean {np.mean(aucs):.4f} delta {np.mean(aucs) - full:+.4f}")
    if args.out:
        X.save_json(args.out, res)


if __name__ == "__main__":
    main()
