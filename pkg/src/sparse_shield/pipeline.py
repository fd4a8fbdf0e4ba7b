"""Two-analyzer defense: offline construction and per-sample detection, plus dataset metrics.

The DCT analyzer scores image patches in the frequency domain; the feature
analyzer scores penultimate-layer features supplied by the (external)
victim model. Either flag marks the sample as Trojan.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter

import numpy as np

from . import dct as dctmod
from .dictionary import (
    DictLearnConfig,
    Dictionary,
    InsufficientDataError,
    distinct_columns,
    learn_dictionary,
)
from .linalg import MvmPlan, mvm, truncated_svd
from .outlier import (
    OutlierModel,
    classify_patches,
    fit_moments,
    mahalanobis,
    image_fpr_bound,
    model_from_moments,
    refine_mask,
    tune_epsilon,
)
from .sparse import batch_reconstruct, omp
from .tensor_io import DefenseConfig, Tensor, image_to_tensor, load_image, read_tensor, write_tensor

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "sparse-shield-bundle"
BUNDLE_VERSION = 1


class BundleError(ValueError):
    """Bundle directory missing, malformed or incompatible with an input."""


@dataclass(frozen=True)
class AnalyzerBundle:
    kind: str  # "dct" or "feature"
    dictionary: Dictionary
    sparsity: int
    model: OutlierModel
    patch_size: int | None = None
    erosion_kernel: int = 3
    dilation_kernel: int = 3
    projection: np.ndarray | None = None  # (f, r) float32, feature kind only
    singulars: np.ndarray | None = None
    fill_mean: np.ndarray | None = None  # per-channel benign mean, dct kind only
    patches: int = 1  # patches per image used when tuning the threshold
    target_fpr: float | None = None

    def __post_init__(self):
        if self.kind not in ("dct", "feature"):
            raise ValueError(f"unknown analyzer kind {self.kind!r}")
        if (self.projection is not None) != (self.kind == "feature"):
            raise ValueError("projection is required for, and only for, the feature analyzer")
        if self.kind == "feature" and self.projection.shape[1] != self.dictionary.dim:
            raise ValueError("dictionary dimension must match the projected dimension")
        if self.kind == "dct" and self.patch_size is None:
            raise ValueError("dct analyzer needs a patch size")

    @property
    def fpr_bound(self) -> float:
        return image_fpr_bound(self.model.dim, self.patches, self.model.epsilon_sq)


def _as_image_array(img) -> np.ndarray:
    arr = np.asarray(getattr(img, "array", img), dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def _quantized_model(R: np.ndarray, epsilon_sq: float | None) -> OutlierModel:
    """Fit moments and round them to float32 so saved and in-memory bundles agree."""
    fitted = fit_moments(R)
    mu = fitted.mean.astype(np.float32).astype(np.float64)
    cov = fitted.covariance.astype(np.float32).astype(np.float64)
    return model_from_moments(mu, cov, fitted.fit_count, epsilon_sq)


def _dict_config(m_req: int, X: np.ndarray, cfg: DefenseConfig) -> DictLearnConfig:
    """Cap the atom count at the number of training columns; that many must be distinct."""
    m = min(m_req, X.shape[1])
    distinct = distinct_columns(X).size
    if distinct < max(m, 2):
        raise InsufficientDataError(
            f"need {max(m, 2)} distinct nonzero columns for {m} atoms, found {distinct} among {X.shape[1]}"
        )
    init = None if cfg.init_cols is None else min(cfg.init_cols, m)
    return DictLearnConfig(target_cols=m, init_cols=init, growth=cfg.growth, seed=cfg.seed)


def _project(U: np.ndarray, f: np.ndarray, plan: MvmPlan | None = None):
    """Projected feature U^T f and the norm of the part of f outside span(U)."""
    f = np.asarray(f, dtype=np.float32)
    z = mvm(np.ascontiguousarray(U.T), f, plan).astype(np.float64)
    lost = float(np.linalg.norm(f.astype(np.float64) - U.astype(np.float64) @ z))
    return z, lost


def build_dct_bundle(images, cfg: DefenseConfig, threads: int = 1, timings: dict | None = None) -> AnalyzerBundle:
    timings = {} if timings is None else timings
    # columns are spread over the workers, so each pursuit runs single-threaded
    plan = MvmPlan()
    t0 = perf_counter()
    basis = dctmod.build_dct_basis(cfg.patch_size)
    arrays = [_as_image_array(im) for im in images]
    if not arrays:
        raise InsufficientDataError("empty image corpus")
    grids = [dctmod.extract_dct(a, basis) for a in arrays]
    X = np.hstack([g.coeffs.T for g in grids])
    if cfg.dct_dim is not None and cfg.dct_dim != X.shape[0]:
        raise ValueError(f"configured dct_dim {cfg.dct_dim} but patches have {X.shape[0]} coefficients")
    fill_mean = np.mean([a.reshape(a.shape[0], -1).mean(axis=1) for a in arrays], axis=0)
    timings["dct_extract"] = perf_counter() - t0

    t0 = perf_counter()
    D = learn_dictionary(X, _dict_config(cfg.dict_cols, X, cfg))
    timings["dct_dictionary"] = perf_counter() - t0

    t0 = perf_counter()
    codes = batch_reconstruct(D, X, min(cfg.sparsity, D.size), plan, threads)
    patches = grids[0].n_patches
    eps = cfg.epsilon_sq or tune_epsilon(X.shape[0], patches, cfg.target_fpr)
    model = _quantized_model(codes.residuals.T, eps)
    timings["dct_moments"] = perf_counter() - t0
    return AnalyzerBundle(
        kind="dct",
        dictionary=D,
        sparsity=cfg.sparsity,
        model=model,
        patch_size=cfg.patch_size,
        erosion_kernel=cfg.erosion_kernel,
        dilation_kernel=cfg.dilation_kernel,
        fill_mean=fill_mean.astype(np.float32),
        patches=patches,
        target_fpr=None if cfg.epsilon_sq else cfg.target_fpr,
    )


def build_feature_bundle(features, cfg: DefenseConfig, threads: int = 1, timings: dict | None = None) -> AnalyzerBundle:
    """``features`` is (n_samples, f): one flattened feature map per row."""
    timings = {} if timings is None else timings
    plan = MvmPlan()
    F = np.asarray(features, dtype=np.float32).astype(np.float64).T
    if F.ndim != 2 or F.shape[1] < 2:
        raise InsufficientDataError("need at least 2 feature vectors")
    t0 = perf_counter()
    U, s, r = truncated_svd(F, cfg.svd_energy_fraction)
    U = U.astype(np.float32)
    projected = [_project(U, F[:, i], plan) for i in range(F.shape[1])]
    Z = np.stack([z for z, _ in projected], axis=1)
    lost = np.array([v for _, v in projected])
    D = learn_dictionary(Z, _dict_config(cfg.feature_dict_cols, Z, cfg))
    timings["feature_svd_dictionary"] = perf_counter() - t0

    t0 = perf_counter()
    codes = batch_reconstruct(D, Z, min(cfg.feature_sparsity, D.size), plan, threads)
    # outlier variable: [projected OMP residual | energy lost by the projection]
    vectors = np.vstack([codes.residuals, lost[None, :]]).T
    eps = cfg.feature_epsilon_sq or tune_epsilon(vectors.shape[1], 1, cfg.target_fpr)
    model = _quantized_model(vectors, eps)
    timings["feature_moments"] = perf_counter() - t0
    return AnalyzerBundle(
        kind="feature",
        dictionary=D,
        sparsity=cfg.feature_sparsity,
        model=model,
        projection=U,
        singulars=s.astype(np.float32),
        patches=1,
        target_fpr=None if cfg.feature_epsilon_sq else cfg.target_fpr,
    )


def build_defense(clean_images, clean_features, cfg: DefenseConfig, threads: int = 1, timings: dict | None = None):
    """Build both analyzers from unlabeled benign data.

    ``clean_features`` may be ``None``, in which case only the DCT analyzer
    is built and the second element of the result is ``None``.
    """
    dct_bundle = build_dct_bundle(clean_images, cfg, threads, timings)
    feat_bundle = None
    if clean_features is not None:
        feat_bundle = build_feature_bundle(clean_features, cfg, threads, timings)
    return dct_bundle, feat_bundle


def unlabeled_view(samples) -> list[dict]:
    """Strip manifest entries down to input paths so nothing downstream sees labels."""
    return [{"image_path": s["image_path"], "feature_path": s.get("feature_path")} for s in samples]


def build_defense_from_manifest(samples, base_dir, cfg: DefenseConfig, threads: int = 1):
    view = unlabeled_view(samples)
    base = Path(base_dir)
    images = [image_to_tensor(load_image(base / s["image_path"])) for s in view]
    feats = None
    if all(s["feature_path"] for s in view):
        feats = np.stack([read_tensor(base / s["feature_path"]).data for s in view])
    return build_defense(images, feats, cfg, threads)


# -- online detection --------------------------------------------------------


@dataclass
class DctResult:
    decision: bool
    patch_mask: np.ndarray  # raw outlier bits on the patch grid
    refined_mask: np.ndarray
    mask: np.ndarray  # refined mask upsampled to pixels
    suppressed: np.ndarray
    distances: np.ndarray


def dct_analyze(img, bundle: AnalyzerBundle, threads: int = 1, timings: dict | None = None) -> DctResult:
    clock = perf_counter if timings is not None else None
    arr = _as_image_array(img)
    # patches are spread over the workers, so each pursuit runs single-threaded
    plan = MvmPlan()
    if clock:
        t0 = clock()
    basis = dctmod.build_dct_basis(bundle.patch_size)
    grid = dctmod.extract_dct(arr, basis)
    if grid.coeffs.shape[1] != bundle.dictionary.dim:
        raise BundleError(
            f"image gives {grid.coeffs.shape[1]} coefficients per patch, bundle expects {bundle.dictionary.dim}"
        )
    if clock:
        t1 = clock()
        timings["D-DCT"] = timings.get("D-DCT", 0.0) + t1 - t0
    codes = batch_reconstruct(
        bundle.dictionary, grid.coeffs.T, min(bundle.sparsity, bundle.dictionary.size), plan, threads
    )
    if clock:
        t2 = clock()
        timings["D-SR"] = timings.get("D-SR", 0.0) + t2 - t1
    dist = np.atleast_1d(mahalanobis(bundle.model, codes.residuals.T))
    bits = classify_patches(bundle.model, codes.residuals.T).reshape(grid.n_patches_y, grid.n_patches_x)
    if clock:
        t3 = clock()
        timings["D-OLD"] = timings.get("D-OLD", 0.0) + t3 - t2
    refined = refine_mask(bits, bundle.erosion_kernel, bundle.dilation_kernel)
    up = dctmod.upsample_mask(refined, bundle.patch_size)
    suppressed = dctmod.suppress(arr, up, bundle.fill_mean)
    if clock:
        timings["D-MASK"] = timings.get("D-MASK", 0.0) + clock() - t3
    return DctResult(bool(refined.any()), bits, refined, up, suppressed, dist.reshape(bits.shape))


@dataclass
class FeatureResult:
    decision: bool
    denoised: np.ndarray
    distance: float


def feature_analyze(feat, bundle: AnalyzerBundle, threads: int = 1, timings: dict | None = None) -> FeatureResult:
    clock = perf_counter if timings is not None else None
    f = np.asarray(getattr(feat, "data", feat), dtype=np.float32).reshape(-1)
    U = bundle.projection
    if f.shape[0] != U.shape[0]:
        raise BundleError(f"feature length {f.shape[0]} != projection input {U.shape[0]}")
    plan = MvmPlan(par_rows=threads)
    if clock:
        t0 = clock()
    z, lost = _project(U, f, plan)
    if clock:
        t1 = clock()
        timings["F-PROJ"] = timings.get("F-PROJ", 0.0) + t1 - t0
    code = omp(bundle.dictionary, z, min(bundle.sparsity, bundle.dictionary.size), plan)
    if clock:
        t2 = clock()
        timings["F-SR"] = timings.get("F-SR", 0.0) + t2 - t1
    vec = np.concatenate([code.residual, [lost]])
    dist = mahalanobis(bundle.model, vec)
    decision = bool(dist >= bundle.model.epsilon_sq)
    if clock:
        t3 = clock()
        timings["F-OLD"] = timings.get("F-OLD", 0.0) + t3 - t2
    denoised = mvm(U, code.reconstruction, plan)
    if clock:
        timings["F-PROJ"] += clock() - t3
    return FeatureResult(decision, denoised, float(dist))


@dataclass
class Verdict:
    d_da: bool
    d_fa: bool | None
    trojan: bool
    mask_coverage: float
    attack_success: int | None = None
    suppressed: np.ndarray | None = field(default=None, repr=False)
    denoised: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "d_da": self.d_da,
            "d_fa": self.d_fa,
            "trojan": self.trojan,
            "mask_coverage": self.mask_coverage,
        }


def attack_success(d_da: bool, d_fa: bool, predicted: int, target: int) -> int:
    """S = (1 - d_DA)(1 - d_FA)[M(x) == c_t]."""
    return (1 - int(d_da)) * (1 - int(d_fa)) * int(predicted == target)


def detect(img, feat, bundles, predicted_class=None, target_class=None, threads: int = 1) -> Verdict:
    dct_bundle, feat_bundle = bundles
    da = dct_analyze(img, dct_bundle, threads)
    fa = None
    if feat is not None:
        if feat_bundle is None:
            raise BundleError("feature given but the bundle has no feature analyzer")
        fa = feature_analyze(feat, feat_bundle, threads)
    d_fa = None if fa is None else fa.decision
    s = None
    if predicted_class is not None and target_class is not None:
        s = attack_success(da.decision, bool(d_fa), predicted_class, target_class)
    return Verdict(
        d_da=da.decision,
        d_fa=d_fa,
        trojan=da.decision or bool(d_fa),
        mask_coverage=float(da.mask.mean()),
        attack_success=s,
        suppressed=da.suppressed,
        denoised=None if fa is None else fa.denoised,
    )


# -- dataset metrics ---------------------------------------------------------


@dataclass
class SampleRecord:
    is_trojan: bool
    d_da: bool
    d_fa: bool
    predicted_class: int
    true_label: int
    target_class: int | None = None
    predicted_after: int | None = None
    mask_popcount: int = 0
    name: str = ""

    @property
    def trojan_verdict(self) -> bool:
        return self.d_da or self.d_fa


def _rate(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("rate over an empty set")
    return sum(values) / len(values)


@dataclass
class DetectionReport:
    samples: list[SampleRecord]
    metrics: dict

    def to_json(self) -> dict:
        return {
            "metrics": self.metrics,
            "samples": [
                {
                    "name": s.name,
                    "is_trojan": s.is_trojan,
                    "d_da": s.d_da,
                    "d_fa": s.d_fa,
                    "trojan": s.trojan_verdict,
                    "mask_popcount": s.mask_popcount,
                    "predicted_class": s.predicted_class,
                    "predicted_class_after_suppression": s.predicted_after,
                }
                for s in self.samples
            ],
        }


def compute_metrics(records: list[SampleRecord], tol: float = 1e-9) -> DetectionReport:
    """Per-analyzer rates and the derived attack/accuracy metrics, both by formula and by counting."""
    trojans = [r for r in records if r.is_trojan]
    clean = [r for r in records if not r.is_trojan]
    if not trojans or not clean:
        raise ValueError("need both trojan and clean samples")
    tpr_da = _rate(r.d_da for r in trojans)
    tpr_fa = _rate(r.d_fa for r in trojans)
    fpr_da = _rate(r.d_da for r in clean)
    fpr_fa = _rate(r.d_fa for r in clean)
    hit = _rate(r.predicted_class == r.target_class for r in trojans)
    clean_acc = _rate(r.predicted_class == r.true_label for r in clean)
    asr = (1 - tpr_da) * (1 - tpr_fa) * hit
    acc_c = (1 - fpr_da) * (1 - fpr_fa) * clean_acc
    asr_counted = _rate(attack_success(r.d_da, r.d_fa, r.predicted_class, r.target_class) for r in trojans)
    acc_counted = _rate(
        (1 - r.d_da) * (1 - r.d_fa) * (r.predicted_class == r.true_label) for r in clean
    )
    after = [r for r in trojans if r.predicted_after is not None]
    tgr = _rate(r.predicted_after == r.true_label for r in after) if after else None
    metrics = {
        "n_trojan": len(trojans),
        "n_clean": len(clean),
        "tpr_da": tpr_da,
        "tpr_fa": tpr_fa,
        "fpr_da": fpr_da,
        "fpr_fa": fpr_fa,
        "infected_hit_rate": hit,
        "clean_model_accuracy": clean_acc,
        "asr": asr,
        "asr_counted": asr_counted,
        "asr_divergent": abs(asr - asr_counted) > tol,
        "acc_c": acc_c,
        "acc_c_counted": acc_counted,
        "acc_c_divergent": abs(acc_c - acc_counted) > tol,
        "tgr": tgr,
    }
    if metrics["asr_divergent"]:
        log.warning("formula ASR %.6f differs from counted ASR %.6f", asr, asr_counted)
    return DetectionReport(records, metrics)


def load_manifest(path) -> tuple[list[dict], Path]:
    path = Path(path)
    doc = json.loads(path.read_text())
    samples = doc["samples"] if isinstance(doc, dict) else doc
    required = ("image_path", "predicted_class", "true_label", "is_trojan")
    for i, s in enumerate(samples):
        missing = [k for k in required if k not in s]
        if missing:
            raise ValueError(f"manifest entry {i} lacks {missing}")
    return samples, path.parent


def evaluate(samples, base_dir, bundles, threads: int = 1) -> DetectionReport:
    """Run both analyzers on every manifest entry and aggregate the metrics.

    Per-sample work is independent; results are collected in manifest order
    so the aggregates do not depend on scheduling.
    """
    base = Path(base_dir)
    dct_bundle, feat_bundle = bundles

    def one(s) -> SampleRecord:
        img = image_to_tensor(load_image(base / s["image_path"]))
        da = dct_analyze(img, dct_bundle)
        d_fa = False
        if s.get("feature_path") and feat_bundle is not None:
            d_fa = feature_analyze(read_tensor(base / s["feature_path"]), feat_bundle).decision
        return SampleRecord(
            is_trojan=bool(s["is_trojan"]),
            d_da=da.decision,
            d_fa=d_fa,
            predicted_class=int(s["predicted_class"]),
            true_label=int(s["true_label"]),
            target_class=None if s.get("target_class") is None else int(s["target_class"]),
            predicted_after=s.get("predicted_class_after_suppression"),
            mask_popcount=int(da.refined_mask.sum()),
            name=s["image_path"],
        )

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(one, samples))
    else:
        records = [one(s) for s in samples]
    return compute_metrics(records)


# -- persistence -------------------------------------------------------------


def _write(dirpath: Path, name: str, arr) -> str:
    write_tensor(Tensor.from_array(np.asarray(arr, dtype=np.float32)), dirpath / name)
    return name


def _bundle_entry(b: AnalyzerBundle, out: Path) -> dict:
    k = b.kind
    entry = {
        "kind": k,
        "sparsity": b.sparsity,
        "patches": b.patches,
        "target_fpr": b.target_fpr,
        "dictionary": {
            "file": _write(out, f"{k}_dictionary.clnt", b.dictionary.atoms),
            "seed": b.dictionary.seed,
            "source_ids": list(b.dictionary.source_ids),
        },
        "outlier": {
            "mean": _write(out, f"{k}_mean.clnt", b.model.mean),
            "covariance": _write(out, f"{k}_covariance.clnt", b.model.covariance),
            "epsilon_sq": b.model.epsilon_sq,
            "fit_count": b.model.fit_count,
        },
    }
    if k == "dct":
        entry.update(
            patch_size=b.patch_size,
            erosion_kernel=b.erosion_kernel,
            dilation_kernel=b.dilation_kernel,
            fill_mean=[float(v) for v in b.fill_mean],
        )
    else:
        entry["projection"] = _write(out, "feature_projection.clnt", b.projection)
        entry["singulars"] = _write(out, "feature_singulars.clnt", b.singulars)
    return entry


def save_bundles(out_dir, dct_bundle: AnalyzerBundle, feat_bundle: AnalyzerBundle | None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "dct": _bundle_entry(dct_bundle, out),
        "feature": None if feat_bundle is None else _bundle_entry(feat_bundle, out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _read(dirpath: Path, name: str) -> np.ndarray:
    return read_tensor(dirpath / name).array


def _load_entry(entry: dict, d: Path) -> AnalyzerBundle:
    dic = entry["dictionary"]
    D = Dictionary(_read(d, dic["file"]), tuple(dic["source_ids"]), int(dic["seed"]))
    o = entry["outlier"]
    model = model_from_moments(
        _read(d, o["mean"]).astype(np.float64),
        _read(d, o["covariance"]).astype(np.float64),
        int(o["fit_count"]),
        float(o["epsilon_sq"]),
    )
    common = dict(
        kind=entry["kind"],
        dictionary=D,
        sparsity=int(entry["sparsity"]),
        model=model,
        patches=int(entry["patches"]),
        target_fpr=entry.get("target_fpr"),
    )
    if entry["kind"] == "dct":
        return AnalyzerBundle(
            **common,
            patch_size=int(entry["patch_size"]),
            erosion_kernel=int(entry["erosion_kernel"]),
            dilation_kernel=int(entry["dilation_kernel"]),
            fill_mean=np.array(entry["fill_mean"], dtype=np.float32),
        )
    return AnalyzerBundle(
        **common,
        projection=_read(d, entry["projection"]).copy(),
        singulars=_read(d, entry["singulars"]).copy(),
    )


def load_bundles(bundle_dir):
    d = Path(bundle_dir)
    path = d / "manifest.json"
    if not path.is_file():
        raise BundleError(f"no manifest.json in {d}")
    try:
        manifest = json.loads(path.read_text())
        if manifest.get("format") != BUNDLE_FORMAT:
            raise BundleError(f"{path} is not a {BUNDLE_FORMAT} manifest")
        dct_b = _load_entry(manifest["dct"], d)
        feat_b = None if manifest.get("feature") is None else _load_entry(manifest["feature"], d)
    except BundleError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise BundleError(f"malformed bundle {d}: {exc}") from exc
    return dct_b, feat_b
