"""Sweep (query budget, record cap) and report when the extraction attack succeeds.

Prints one block of key=value lines per setting, separated by blank lines.
"""

import argparse

import numpy as np

from hetrade.extraction import evaluate_defense


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--features", type=int, default=6)
    ap.add_argument("--queries", type=int, nargs="+", default=[1, 3, 7])
    ap.add_argument("--caps", type=int, nargs="+", default=[1, 3, 256])
    ap.add_argument("--trials", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    for k in args.queries:
        for cap in args.caps:
            print(evaluate_defense(args.features, k, cap, args.trials, rng).to_text())
            print()


if __name__ == "__main__":
    main()
