"""Synthetic end-to-end detection run: 400 benign textures, 200 held-out with and without a trigger."""

import argparse
import json

from sparse_shield.experiment import run_e2e


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=400)
    ap.add_argument("--n-heldout", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    res = run_e2e(args.n_train, args.n_heldout, args.seed, threads=args.threads)
    print(json.dumps(res.as_dict(), indent=1))


if __name__ == "__main__":
    main()
