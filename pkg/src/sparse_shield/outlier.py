"""Mahalanobis outlier scoring with a Chebyshev-derived threshold, plus mask morphology."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .linalg import default_ridge, sym_inverse


@dataclass(frozen=True)
class OutlierModel:
    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    fit_count: int
    epsilon_sq: float | None = None
    ridge: float = 0.0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def with_threshold(self, epsilon_sq: float) -> "OutlierModel":
        if not epsilon_sq > 0:
            raise ValueError("epsilon_sq must be > 0")
        return replace(self, epsilon_sq=float(epsilon_sq))


def fit_moments(R, ridge: float | None = None) -> OutlierModel:
    """Sample mean and (N-1)-normalized covariance of the rows of ``R`` (N x d)."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got shape {R.shape}")
    N = R.shape[0]
    mu = R.mean(axis=0)
    centered = R - mu
    cov = centered.T @ centered / (N - 1)
    cov = (cov + cov.T) / 2
    return model_from_moments(mu, cov, N, ridge=ridge)


def model_from_moments(mu, cov, N: int, epsilon_sq=None, ridge=None) -> OutlierModel:
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if ridge is None:
        ridge = default_ridge(cov)
    prec = sym_inverse(cov, ridge)
    return OutlierModel(mu, cov, prec, int(N), epsilon_sq, float(ridge))


def mahalanobis(model: OutlierModel, x) -> np.ndarray | float:
    """(x - mu) Sigma^{-1} (x - mu)^T for one vector or each row of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"expected dimension {model.dim}, got {x.shape[-1]}")
    diff = x - model.mean
    dist = np.einsum("...i,ij,...j->...", diff, model.precision, diff)
    dist = np.maximum(dist, 0.0)
    return float(dist) if dist.ndim == 0 else dist


def chebyshev_bound(d: int, N: int, epsilon_sq: float) -> float:
    """Upper bound on P(dist >= epsilon_sq) for a fresh sample."""
    return min(1.0, d * (N * N - 1 + N * epsilon_sq) / (N * N * epsilon_sq))


def image_fpr_bound(d: int, patches: int, epsilon_sq: float) -> float:
    """1 - (1 - d/eps^2)^patches: benign image flag probability when any patch can trip."""
    per_patch = min(1.0, d / epsilon_sq)
    return float(-np.expm1(patches * np.log1p(-per_patch))) if per_patch < 1 else 1.0


def tune_epsilon(d: int, patches: int, target_fpr: float) -> float:
    """Smallest eps^2 whose image-level bound equals ``target_fpr``."""
    if not 0 < target_fpr < 1:
        raise ValueError(f"target_fpr must lie in (0, 1), got {target_fpr}")
    if patches < 1 or d < 1:
        raise ValueError("d and patches must be >= 1")
    # 1 - (1 - fpr)^(1/K^2), written to stay accurate for tiny rates
    per_patch = -np.expm1(np.log1p(-target_fpr) / patches)
    return float(d / per_patch)


def classify_patches(model: OutlierModel, R) -> np.ndarray:
    """Row k flagged iff its distance reaches the threshold (boundary counts)."""
    if model.epsilon_sq is None:
        raise ValueError("model has no threshold")
    return np.atleast_1d(mahalanobis(model, np.atleast_2d(R))) >= model.epsilon_sq


def _kernel_shape(k) -> tuple[int, int]:
    kh, kw = (k, k) if np.isscalar(k) else k
    if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {(kh, kw)}")
    return int(kh), int(kw)


def _windows(mask, k, pad_value):
    kh, kw = _kernel_shape(k)
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, ((kh // 2,) * 2, (kw // 2,) * 2), constant_values=pad_value)
    return sliding_window_view(padded, (kh, kw))


def erode(mask, k=3, border: bool = False) -> np.ndarray:
    """1 iff every bit under the window is 1; outside the mask counts as ``border``."""
    return _windows(mask, k, border).all(axis=(-2, -1))


def dilate(mask, k=3) -> np.ndarray:
    """1 iff any bit under the window is 1."""
    return _windows(mask, k, False).any(axis=(-2, -1))


def refine_mask(mask, k=3, dilate_k=None) -> np.ndarray:
    """Morphological opening; ``dilate_k`` overrides the dilation kernel."""
    return dilate(erode(mask, k), k if dilate_k is None else dilate_k)
