"""Write a small synthetic corpus (train images + features, labelled eval manifest)."""

import argparse

from sparse_shield.synthetic import write_fixture_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--n-train", type=int, default=40)
    ap.add_argument("--n-eval", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    paths = write_fixture_corpus(args.out_dir, args.n_train, args.n_eval, args.seed)
    for k, v in paths.items():
        print(f"{k}: {v}")


if __name__ == "__main__":
    main()
