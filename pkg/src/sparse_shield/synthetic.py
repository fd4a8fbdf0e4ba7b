"""Synthetic benign images plus a toy backdoored classifier keyed on a square trigger.

Used by the end-to-end experiment and the tests. Images are smoothed noise
textures with a class-dependent colour tint, quantized to 8 bits. The toy
victim model predicts the target class whenever a bright square is present,
and otherwise the tint class nearest to the image's mean colour.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

TRIGGER_SIZE = 4

# a 3x3 erosion would erase any trigger covering at most 2x2 patches
FIXTURE_CONFIG = """\
patch_size = 4
erosion_kernel = 1
dilation_kernel = 3
target_fpr = 0.3
"""


def class_tints(n_classes: int, channels: int = 3, seed: int = 1234) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.12, 0.12, size=(n_classes, channels))


def smooth_noise_image(rng: np.random.Generator, size: int = 32, channels: int = 3,
                       sigma: float = 2.0, tint=None) -> np.ndarray:
    """[C, H, W] texture clipped to [0.05, 0.9] and quantized to k/255."""
    noise = rng.standard_normal((channels, size, size))
    smooth = np.stack([gaussian_filter(c, sigma, mode="wrap") for c in noise])
    smooth /= smooth.std() + 1e-12
    img = 0.5 + 0.1 * smooth
    if tint is not None:
        img += np.asarray(tint)[:, None, None]
    img = np.clip(img, 0.05, 0.9)
    return np.floor(img * 255 + 0.5) / 255


def trigger_origin(size: int = 32, margin: int = 2) -> tuple[int, int]:
    """Bottom-right placement, ``margin`` pixels in from the border."""
    o = size - TRIGGER_SIZE - margin
    return o, o


def add_square_trigger(img: np.ndarray, origin=None, value: float = 1.0) -> np.ndarray:
    out = np.array(img, dtype=np.float64)
    top, left = origin if origin is not None else trigger_origin(out.shape[-1])
    out[:, top : top + TRIGGER_SIZE, left : left + TRIGGER_SIZE] = value
    return out


def trigger_patches(origin, patch_size: int) -> set[tuple[int, int]]:
    """Patch-grid cells touched by the trigger square."""
    top, left = origin
    ys = range(top // patch_size, (top + TRIGGER_SIZE - 1) // patch_size + 1)
    xs = range(left // patch_size, (left + TRIGGER_SIZE - 1) // patch_size + 1)
    return {(y, x) for y in ys for x in xs}


@dataclass
class ToyVictim:
    """Backdoored stand-in classifier."""

    tints: np.ndarray
    target_class: int = 0

    def has_trigger(self, img: np.ndarray) -> bool:
        bright = np.all(np.asarray(img) >= 0.98, axis=0).astype(np.int32)
        if bright.shape[0] < TRIGGER_SIZE or bright.shape[1] < TRIGGER_SIZE:
            return False
        win = np.lib.stride_tricks.sliding_window_view(bright, (TRIGGER_SIZE, TRIGGER_SIZE))
        return bool(win.all(axis=(-2, -1)).any())

    def predict(self, img: np.ndarray) -> int:
        if self.has_trigger(img):
            return self.target_class
        colour = np.asarray(img).reshape(img.shape[0], -1).mean(axis=1) - 0.5
        return int(np.argmin(np.linalg.norm(self.tints - colour, axis=1)))

    def features(self, img: np.ndarray, dim: int = 64, seed: int = 99) -> np.ndarray:
        """Fixed random ReLU features of a 4x4-pooled image (a penultimate-layer surrogate)."""
        img = np.asarray(img, dtype=np.float64)
        C, H, W = img.shape
        pooled = img.reshape(C, H // 4, 4, W // 4, 4).mean(axis=(2, 4)).ravel()
        W_ = np.random.default_rng(seed).standard_normal((dim, pooled.size)) / np.sqrt(pooled.size)
        return np.maximum(W_ @ (pooled - 0.5), 0.0).astype(np.float32)


def make_corpus(n: int, seed: int, n_classes: int = 4, size: int = 32, sigma: float = 2.0):
    """``n`` benign images with their (hidden) class labels."""
    rng = np.random.default_rng(seed)
    tints = class_tints(n_classes)
    labels = rng.integers(0, n_classes, size=n)
    images = [smooth_noise_image(rng, size, tints.shape[1], sigma, tints[c]) for c in labels]
    return images, labels


def write_fixture_corpus(out_dir, n_train: int = 40, n_eval: int = 20, seed: int = 0,
                         trojan_fraction: float = 0.5, target_class: int = 0) -> dict:
    """Write a training corpus and a labelled eval manifest under ``out_dir``.

    Layout: ``train/*.ppm`` plus ``train_features.clnt`` (n_train, f), and
    ``eval/*.ppm`` with one ``*.clnt`` feature vector each, listed in
    ``manifest.json``, and a ``defense.cfg`` suited to 32x32 images.
    Returns the paths written.
    """
    from pathlib import Path

    from .tensor_io import Tensor, image_to_tensor, save_image, tensor_to_image, write_tensor

    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    images, labels = make_corpus(n_train + n_eval, seed)
    victim = ToyVictim(class_tints(4), target_class)

    def store(img, path):
        u8 = tensor_to_image(Tensor.from_array(img))
        save_image(u8, path)
        # features come from the 8-bit image the detector will actually read
        return image_to_tensor(u8).array.astype(np.float64)

    feats = []
    for i in range(n_train):
        feats.append(victim.features(store(images[i], out / "train" / f"img_{i:04d}.ppm")))
    write_tensor(Tensor.from_array(np.stack(feats)), out / "train_features.clnt")

    rng = np.random.default_rng(seed + 1)
    samples = []
    for k in range(n_eval):
        img, label = images[n_train + k], int(labels[n_train + k])
        trojan = bool(rng.random() < trojan_fraction)
        if trojan:
            img = add_square_trigger(img)
        name = f"eval/img_{k:04d}.ppm"
        stored = store(img, out / name)
        fname = f"eval/img_{k:04d}.clnt"
        write_tensor(Tensor.from_array(victim.features(stored)), out / fname)
        samples.append({
            "image_path": name,
            "feature_path": fname,
            "predicted_class": victim.predict(stored),
            "true_label": label,
            "is_trojan": trojan,
            "target_class": target_class if trojan else None,
        })
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"samples": samples}, indent=1) + "\n")
    config = out / "defense.cfg"
    config.write_text(FIXTURE_CONFIG)
    return {"train": out / "train", "features": out / "train_features.clnt",
            "manifest": manifest, "config": config}
