"""Latency micro-benchmarks for the numeric kernels and the per-sample defense.

Every kernel is timed over ``runs`` calls at batch size 1. Rows report the
mean and standard deviation in microseconds. ``checksum`` hashes the kernel
output so runs under different thread counts can be compared for identical
numerics.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from time import perf_counter

import numpy as np

from . import dct as dctmod
from . import synthetic as syn
from .linalg import MvmPlan, mgs_qr, mvm, qr_append
from .sparse import _Cached, omp
from .tensor_io import DefenseConfig

KERNELS = ("mvm", "omp", "qr", "dct", "defense")
DEFAULT_SIZES = {"mvm": "1000x48", "omp": "48x1000", "qr": "64x20", "dct": "32x32", "defense": "32x32"}


@dataclass
class BenchRow:
    kernel: str
    component: str
    size: str
    threads: int
    runs: int
    mean_us: float
    std_us: float

    def as_tuple(self):
        return (self.kernel, self.component, self.size, self.threads, self.runs,
                f"{self.mean_us:.3f}", f"{self.std_us:.3f}")


HEADER = ("kernel", "component", "size", "threads", "runs", "mean_us", "std_us")


def parse_size(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        a, b = int(a), int(b)
    except ValueError:
        raise ValueError(f"size must look like 1000x48, got {text!r}") from None
    if a < 1 or b < 1:
        raise ValueError(f"size must be positive, got {text!r}")
    return a, b


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _stats(samples) -> tuple[float, float]:
    s = np.asarray(samples) * 1e6
    return float(s.mean()), float(s.std(ddof=1)) if s.size > 1 else 0.0


def _time(fn, runs: int):
    out = None
    samples = []
    for _ in range(runs):
        t = perf_counter()
        out = fn()
        samples.append(perf_counter() - t)
    return samples, out


def _unit_columns(rng, l, m):
    D = rng.standard_normal((l, m)).astype(np.float32)
    return D / np.linalg.norm(D, axis=0)


def bench_mvm(size, threads, runs, seed, **_):
    rows, cols = size
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((rows, cols)).astype(np.float32)
    x = rng.standard_normal(cols).astype(np.float32)
    plan = MvmPlan(par_rows=threads)
    samples, y = _time(lambda: mvm(A, x, plan), runs)
    return {"total": samples}, _digest(y)


def bench_omp(size, threads, runs, seed, sparsity=5, **_):
    l, m = size
    rng = np.random.default_rng(seed)
    D = _Cached(_unit_columns(rng, l, m))
    xs = rng.standard_normal((runs, l))
    plan = MvmPlan(par_rows=threads)
    parts = {"correlate": [], "select": [], "qr_update": [], "solve": []}
    total = []
    codes = []
    for x in xs:
        tm: dict = {}
        t = perf_counter()
        code = omp(D, x, min(sparsity, m), plan, timings=tm)
        total.append(perf_counter() - t)
        for k in parts:
            parts[k].append(tm.get(k, 0.0))
        codes.append(code.reconstruction)
    return {**parts, "total": total}, _digest(*codes)


def bench_qr(size, threads, runs, seed, **_):
    l, k = size
    rng = np.random.default_rng(seed)
    cols = rng.standard_normal((l, k))

    def fold():
        Q, R = np.zeros((l, 0)), np.zeros((0, 0))
        for j in range(k):
            Q, R = qr_append(Q, R, cols[:, j])
        return Q, R

    samples, (Q, R) = _time(fold, runs)
    batch, (Qb, Rb) = _time(lambda: mgs_qr(cols), runs)
    return {"append_fold": samples, "batch_mgs": batch}, _digest(Q, R)


def bench_dct(size, threads, runs, seed, patch_size=4, **_):
    h, w = size
    rng = np.random.default_rng(seed)
    img = rng.random((3, h, w))
    basis = dctmod.build_dct_basis(patch_size)
    samples, grid = _time(lambda: dctmod.extract_dct(img, basis), runs)
    return {"total": samples}, _digest(grid.coeffs)


def bench_defense(size, threads, runs, seed, cfg: DefenseConfig | None = None, train_images=64, **_):
    """Per-sample latency of both analyzers, split by stage."""
    from .pipeline import build_defense, dct_analyze, feature_analyze

    h, w = size
    if h != w or h % 4:
        raise ValueError("defense bench needs square images with side divisible by 4")
    cfg = cfg or DefenseConfig(erosion_kernel=1, target_fpr=0.3, seed=seed)
    images, _ = syn.make_corpus(train_images + runs, seed=seed, size=h)
    victim = syn.ToyVictim(syn.class_tints(4))
    feats = np.stack([victim.features(im) for im in images])
    dct_b, feat_b = build_defense(images[:train_images], feats[:train_images], cfg, threads)
    stages = ("D-DCT", "D-SR", "D-OLD", "D-MASK", "F-PROJ", "F-SR", "F-OLD")
    parts = {k: [] for k in stages}
    total = []
    outs = []
    for im, f in zip(images[train_images:], feats[train_images:]):
        tm = {k: 0.0 for k in stages}
        t = perf_counter()
        da = dct_analyze(im, dct_b, threads, tm)
        fa = feature_analyze(f, feat_b, threads, tm)
        total.append(perf_counter() - t)
        for k in stages:
            parts[k].append(tm[k])
        outs.extend([da.distances, np.array([fa.distance])])
    return {**parts, "total": total}, _digest(*outs)


_RUNNERS = {"mvm": bench_mvm, "omp": bench_omp, "qr": bench_qr, "dct": bench_dct, "defense": bench_defense}


def run_bench(kernel: str, size: str | None = None, threads: int = 1, runs: int = 100, seed: int = 0, **kw):
    """Return (rows, checksum). Raises ValueError on an unknown kernel or bad size."""
    if kernel not in _RUNNERS:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {', '.join(KERNELS)}")
    if runs < 2:
        raise ValueError("need at least 2 runs")
    size = size or DEFAULT_SIZES[kernel]
    parsed = parse_size(size)
    series, checksum = _RUNNERS[kernel](parsed, threads, runs, seed, **kw)
    rows = [BenchRow(kernel, name, size, threads, runs, *_stats(s)) for name, s in series.items()]
    return rows, checksum


def sparse_share(rows: list[BenchRow]) -> float:
    """Fraction of mean per-sample defense latency spent in sparse recovery."""
    by = {r.component: r.mean_us for r in rows}
    return (by["D-SR"] + by["F-SR"]) / by["total"]
