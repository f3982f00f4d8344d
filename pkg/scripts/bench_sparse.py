"""Median sparse-attention time against dilation r, relative to full causal attention.

    python scripts/bench_sparse.py [--L 256 1024] [--k 2] [--trials 7]
"""
import argparse

from suan import experiments as X


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--L", type=int, nargs="+", default=[256, 1024])
    ap.add_argument("--r", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--trials", type=int, default=7)
    args = ap.parse_args()

    print("L,k,r,median_s,measured_ratio,predicted_ratio")
    for row in X.sparse_timing(args.L, sorted(set(args.r) | {1}), args.k, args.trials):
        print("{L},{k},{r},{median_s:.6f},{measured_ratio:.4f},{predicted_ratio:.4f}".format(**row))


if __name__ == "__main__":
    main()
