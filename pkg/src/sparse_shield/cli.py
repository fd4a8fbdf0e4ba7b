"""Command-line entry point: learn, tune-eps, detect, eval, bench.

Exit status is 0 on success, 1 when ``--exit-on-trojan`` is set and a
sample is flagged, and 2 on usage or data errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from time import perf_counter

import numpy as np

from . import bench
from .linalg import default_threads
from .outlier import tune_epsilon
from .pipeline import (
    BundleError,
    build_defense,
    detect,
    evaluate,
    load_bundles,
    load_manifest,
    save_bundles,
)
from .tensor_io import DefenseConfig, FormatError, image_to_tensor, load_config, load_image, read_tensor

EXIT_OK, EXIT_TROJAN, EXIT_USAGE = 0, 1, 2
IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm"}


class UsageError(Exception):
    pass


def _threads(args) -> int:
    n = args.threads if args.threads is not None else default_threads()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _config(args) -> DefenseConfig:
    cfg = load_config(args.config) if args.config else DefenseConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "target_fpr", None) is not None:
        overrides["target_fpr"] = args.target_fpr
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _existing(path: str, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{kind} not found: {p}")
    return p


def corpus_images(corpus_dir: Path) -> list[Path]:
    files = sorted(p for p in corpus_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no .ppm/.pgm images in {corpus_dir}")
    return files


def _print_table(rows, header, out=None):
    out = out or sys.stdout
    rows = [tuple(str(c) for c in r) for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)), file=out)
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)), file=out)


def cmd_learn(args) -> int:
    corpus = _existing(args.corpus_dir, "corpus directory")
    if not corpus.is_dir():
        raise UsageError(f"corpus is not a directory: {corpus}")
    cfg = _config(args)
    threads = _threads(args)
    timings: dict = {}
    t = perf_counter()
    images = [image_to_tensor(load_image(p)) for p in corpus_images(corpus)]
    feats = None
    if args.features:
        feats = read_tensor(_existing(args.features, "feature file")).array
        if feats.ndim != 2 or feats.shape[0] != len(images):
            raise UsageError(f"features must be ({len(images)}, f), got {feats.shape}")
    timings["load"] = perf_counter() - t
    dct_b, feat_b = build_defense(images, feats, cfg, threads, timings)
    t = perf_counter()
    save_bundles(args.out_dir, dct_b, feat_b)
    timings["save"] = perf_counter() - t
    _print_table([(k, f"{v:.4f}") for k, v in timings.items()], ("stage", "seconds"))
    return EXIT_OK


def cmd_tune_eps(args) -> int:
    print(repr(tune_epsilon(args.d, args.patches, args.target_fpr)))
    return EXIT_OK


def cmd_detect(args) -> int:
    bundles = load_bundles(_existing(args.bundle_dir, "bundle directory"))
    img = image_to_tensor(load_image(_existing(args.image, "image")))
    feat = read_tensor(_existing(args.features, "feature file")) if args.features else None
    v = detect(img, feat, bundles, threads=_threads(args))
    doc = v.to_json()
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        print(" ".join(f"{k}={json.dumps(doc[k])}" for k in sorted(doc)))
    return EXIT_TROJAN if args.exit_on_trojan and v.trojan else EXIT_OK


def cmd_eval(args) -> int:
    bundles = load_bundles(_existing(args.bundle_dir, "bundle directory"))
    samples, base = load_manifest(_existing(args.manifest, "manifest"))
    report = evaluate(samples, base, bundles, _threads(args))
    if args.csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in sorted(report.metrics):
            w.writerow([k, report.metrics[k]])
    else:
        doc = report.to_json() if args.json else {"metrics": report.metrics}
        print(json.dumps(doc, sort_keys=True, indent=1))
    flagged = any(s.trojan_verdict for s in report.samples)
    return EXIT_TROJAN if args.exit_on_trojan and flagged else EXIT_OK


def cmd_bench(args) -> int:
    extra = {}
    if args.kernel == "defense":
        extra["cfg"] = _config(args) if args.config else None
    rows, checksum = bench.run_bench(
        args.kernel, args.size, _threads(args), args.runs, args.seed or 0, **extra
    )
    if args.csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow([*bench.HEADER, "checksum"])
        for r in rows:
            w.writerow([*r.as_tuple(), checksum])
    else:
        _print_table([r.as_tuple() for r in rows], bench.HEADER)
        print(f"checksum {checksum}")
        if args.kernel == "defense":
            print(f"sparse_recovery_share {bench.sparse_share(rows):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value defense config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="worker count (default: $SPARSE_SHIELD_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparse-shield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("learn", parents=[common], help="build analyzer bundles from a benign corpus")
    s.add_argument("corpus_dir")
    s.add_argument("out_dir")
    s.add_argument("--features", help="CLNT tensor (n_images, f) of penultimate-layer features")
    s.add_argument("--target-fpr", type=float)
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("tune-eps", parents=[common], help="print eps^2 for an image-level FPR target")
    s.add_argument("d", type=int, help="outlier vector dimension")
    s.add_argument("patches", type=int, help="scored vectors per sample (K^2)")
    s.add_argument("--target-fpr", type=float, default=0.05)
    s.set_defaults(func=cmd_tune_eps)

    s = sub.add_parser("detect", parents=[common], help="score one image (and optional feature vector)")
    s.add_argument("bundle_dir")
    s.add_argument("image")
    s.add_argument("--features", help="CLNT feature vector for this image")
    s.add_argument("--json", action="store_true")
    s.add_argument("--exit-on-trojan", action="store_true")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", parents=[common], help="detection metrics over a labelled manifest")
    s.add_argument("bundle_dir")
    s.add_argument("manifest")
    fmt = s.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true", help="include per-sample records")
    fmt.add_argument("--csv", action="store_true")
    s.add_argument("--exit-on-trojan", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="kernel latency over repeated runs")
    s.add_argument("--kernel", required=True, choices=bench.KERNELS)
    s.add_argument("--size", help="e.g. 1000x48 (mvm rows x cols, omp l x m, qr l x k, dct/defense h x w)")
    s.add_argument("--runs", type=int, default=100)
    s.add_argument("--csv", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, BundleError, ValueError, OSError, KeyError, np.linalg.LinAlgError) as e:
        print(f"sparse-shield {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
