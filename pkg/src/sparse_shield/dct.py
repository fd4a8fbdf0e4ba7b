"""Patch-wise 2-D DCT front end and mask handling in pixel space."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class DctBasis:
    patch_size: int
    basis: np.ndarray  # (P*P, P*P); row u*P+v is the flattened (u, v) cosine

    @property
    def zigzag(self) -> np.ndarray:
        return zigzag_order(self.patch_size)


def _alpha(k: int, P: int) -> float:
    return np.sqrt(1.0 / P) if k == 0 else np.sqrt(2.0 / P)


def build_dct_basis(P: int) -> DctBasis:
    if P < 1:
        raise ValueError("patch size must be >= 1")
    i = np.arange(P)
    # cos1d[u, i] = cos(u pi (i + 1/2) / P)
    cos1d = np.cos(np.outer(np.arange(P), i + 0.5) * np.pi / P)
    alpha = np.array([_alpha(k, P) for k in range(P)])
    scaled = alpha[:, None] * cos1d
    basis = np.einsum("ui,vj->uvij", scaled, scaled).reshape(P * P, P * P)
    return DctBasis(P, basis)


@lru_cache(maxsize=None)
def _zigzag(P: int) -> tuple[int, ...]:
    order = []
    for s in range(2 * P - 1):
        cells = [(i, s - i) for i in range(P) if 0 <= s - i < P]
        # even anti-diagonals run bottom-left to top-right
        if s % 2 == 0:
            cells.reverse()
        order.extend(i * P + j for i, j in cells)
    return tuple(order)


def zigzag_order(P: int) -> np.ndarray:
    """JPEG zigzag traversal as flat indices into a row-major P x P block."""
    if P < 1:
        raise ValueError("patch size must be >= 1")
    return np.array(_zigzag(P), dtype=np.intp)


@dataclass(frozen=True)
class PatchGrid:
    n_patches_y: int
    n_patches_x: int
    coeffs: np.ndarray  # (n_patches_y * n_patches_x, C * P * P), row-major over the grid
    channels: int
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.n_patches_y * self.n_patches_x


def _patches(img: np.ndarray, P: int) -> tuple[np.ndarray, int, int]:
    C, H, W = img.shape
    ny, nx = H // P, W // P
    if ny == 0 or nx == 0:
        raise ValueError(f"image {H}x{W} is smaller than one {P}x{P} patch")
    crop = img[:, : ny * P, : nx * P]
    # (C, ny, P, nx, P) -> (ny, nx, C, P*P)
    blocks = crop.reshape(C, ny, P, nx, P).transpose(1, 3, 0, 2, 4).reshape(ny, nx, C, P * P)
    return blocks, ny, nx


def extract_dct(img, basis: DctBasis) -> PatchGrid:
    """Per-patch, per-channel DCT coefficients in zigzag order, channels concatenated."""
    arr = np.asarray(getattr(img, "array", img), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    P = basis.patch_size
    blocks, ny, nx = _patches(arr, P)
    coeffs = blocks @ basis.basis.T  # (ny, nx, C, P*P), natural (u, v) order
    coeffs = coeffs[..., zigzag_order(P)]
    C = arr.shape[0]
    return PatchGrid(ny, nx, coeffs.reshape(ny * nx, C * P * P), C, P)


def inverse_dct(grid: PatchGrid, basis: DctBasis) -> np.ndarray:
    """Rebuild the cropped [C, H, W] image from zigzag-ordered coefficients."""
    P, C = grid.patch_size, grid.channels
    zz = grid.coeffs.reshape(grid.n_patches_y, grid.n_patches_x, C, P * P)
    natural = np.empty_like(zz)
    natural[..., zigzag_order(P)] = zz
    blocks = natural @ basis.basis
    out = blocks.reshape(grid.n_patches_y, grid.n_patches_x, C, P, P).transpose(2, 0, 3, 1, 4)
    return out.reshape(C, grid.n_patches_y * P, grid.n_patches_x * P)


def upsample_mask(mask: np.ndarray, P: int) -> np.ndarray:
    """Nearest-neighbour upsampling: each patch bit becomes a P x P block."""
    mask = np.asarray(mask, dtype=bool)
    return np.repeat(np.repeat(mask, P, axis=0), P, axis=1)


def suppress(img, mask: np.ndarray, fallback_mean=None) -> np.ndarray:
    """Fill masked pixels with the per-channel mean of the unmasked pixels.

    ``mask`` may be smaller than the image (cropped border); uncovered pixels
    count as unmasked. With a fully masked image, ``fallback_mean`` (one
    value per channel) is used instead.
    """
    arr = np.array(getattr(img, "array", img), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    C, H, W = arr.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] > H or mask.shape[1] > W:
        raise ValueError(f"mask {mask.shape} larger than image {(H, W)}")
    full = np.zeros((H, W), dtype=bool)
    full[: mask.shape[0], : mask.shape[1]] = mask
    if not full.any():
        return arr
    if full.all():
        if fallback_mean is None:
            raise ValueError("mask covers the whole image and no fallback mean was given")
        fill = np.asarray(fallback_mean, dtype=np.float64).reshape(C)
    else:
        fill = arr[:, ~full].mean(axis=1)
    arr[:, full] = fill[:, None]
    return arr
