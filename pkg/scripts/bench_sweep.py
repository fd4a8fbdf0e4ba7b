"""Sweep the mvm kernel over sizes and thread counts; CSV on stdout."""

import argparse
import csv
import sys

from sparse_shield.bench import HEADER, run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", nargs="+", default=["250x48", "500x48", "1000x48", "2000x48"])
    ap.add_argument("--threads", nargs="+", type=int, default=[1, 2, 4])
    ap.add_argument("--runs", type=int, default=100)
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow([*HEADER, "checksum"])
    for size in args.sizes:
        for t in args.threads:
            rows, digest = run_bench("mvm", size, t, args.runs)
            for r in rows:
                w.writerow([*r.as_tuple(), digest])


if __name__ == "__main__":
    main()
