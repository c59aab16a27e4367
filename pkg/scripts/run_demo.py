"""Replay the whole trade in one process and print the transcript."""

import argparse
import tempfile

from hetrade.demo import run_demo


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--flood-bits", type=int, default=None, help="omit to use the default flooding")
    ap.add_argument("--workdir", default=None)
    args = ap.parse_args()
    kwargs = {} if args.flood_bits is None else {"flood_bits": args.flood_bits}
    with tempfile.TemporaryDirectory() as tmp:
        result = run_demo(seed=args.seed, workdir=args.workdir or tmp, **kwargs)
    raise SystemExit(0 if result.ok else 3)


if __name__ == "__main__":
    main()
