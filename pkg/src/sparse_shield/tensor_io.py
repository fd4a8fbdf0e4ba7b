"""Tensor and image file formats (CLNT, PGM/PPM) plus the flat config parser."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

MAGIC = b"CLNT"


class FormatError(ValueError):
    """Base class for malformed file contents."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class UnsupportedImageError(FormatError):
    pass


@dataclass(frozen=True)
class Tensor:
    """Dense row-major float32 array with an explicit shape.

    ``data`` is always a flat, read-only float32 vector; ``array`` gives the
    shaped view.
    """

    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if any(s < 0 for s in shape):
            raise ValueError(f"negative extent in shape {shape}")
        data = np.ascontiguousarray(self.data, dtype="<f4").reshape(-1)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise LengthMismatchError(
                f"shape {shape} needs {int(np.prod(shape))} values, got {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("tensor contains NaN or Inf")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr)
        return cls(arr.shape, arr.reshape(-1))

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    __hash__ = None


def encode_tensor(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<I", len(t.shape))
    header += struct.pack(f"<{len(t.shape)}Q", *t.shape)
    return header + t.data.astype("<f4").tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < 8:
        raise TruncatedError("missing rank field")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TruncatedError(f"header declares rank {rank} but is only {len(buf)} bytes")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    payload = len(buf) - off
    if payload < 4 * count:
        raise TruncatedError(f"payload has {payload} bytes, need {4 * count}")
    if payload != 4 * count:
        raise LengthMismatchError(f"payload has {payload} bytes, shape {shape} needs {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return Tensor(shape, data)


def read_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


def write_tensor(t: Tensor, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


# -- images -----------------------------------------------------------------


@dataclass(frozen=True)
class ImageU8:
    height: int
    width: int
    channels: int
    pixels: bytes = field(repr=False)

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if len(self.pixels) != self.height * self.width * self.channels:
            raise LengthMismatchError("pixel buffer does not match dimensions")

    def to_array(self) -> np.ndarray:
        """(H, W, C) uint8 view."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, self.channels
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageU8":
        arr = np.asarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(h, w, c, arr.tobytes())


def _header_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    tokens = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise TruncatedError("image header ended early")
        tokens.append(buf[start:i])
    if i >= n:
        raise TruncatedError("image header ended early")
    return tokens, i


def decode_image(buf: bytes) -> ImageU8:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedImageError(f"unsupported image magic {magic!r}")
    channels = 1 if magic == b"P5" else 3
    tokens, i = _header_tokens(buf[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise UnsupportedImageError(f"bad image header {tokens!r}") from exc
    if maxval != 255:
        raise UnsupportedImageError(f"maxval must be 255, got {maxval}")
    start = 2 + i + 1
    need = width * height * channels
    body = buf[start : start + need]
    if len(body) < need:
        raise TruncatedError(f"image payload has {len(body)} bytes, need {need}")
    return ImageU8(height, width, channels, bytes(body))


def encode_image(img: ImageU8) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + img.pixels


def load_image(path) -> ImageU8:
    return decode_image(Path(path).read_bytes())


def save_image(img: ImageU8, path) -> None:
    Path(path).write_bytes(encode_image(img))


def image_to_tensor(img: ImageU8) -> Tensor:
    """Planar [C, H, W] tensor with bytes scaled to [0, 1]."""
    arr = img.to_array().transpose(2, 0, 1).astype(np.float64) / 255.0
    return Tensor.from_array(arr.astype(np.float32))


def tensor_to_image(t: Tensor) -> ImageU8:
    """Inverse of :func:`image_to_tensor`: clamp to [0, 1], scale, round half up."""
    arr = t.array
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected [C,H,W] with C in (1, 3), got {t.shape}")
    scaled = np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0
    pix = np.floor(scaled + 0.5).astype(np.uint8)
    return ImageU8.from_array(pix.transpose(1, 2, 0))


# -- config -----------------------------------------------------------------


@dataclass
class DefenseConfig:
    """Parameters for building both analyzers.

    ``epsilon_sq``/``feature_epsilon_sq`` left as ``None`` are tuned from
    ``target_fpr``.
    """

    patch_size: int = 4
    dct_dim: int | None = None
    dict_cols: int = 1000
    sparsity: int = 5
    epsilon_sq: float | None = None
    feature_dict_cols: int = 420
    feature_sparsity: int = 80
    feature_epsilon_sq: float | None = None
    target_fpr: float = 0.05
    svd_energy_fraction: float = 0.90
    erosion_kernel: int = 3
    dilation_kernel: int = 3
    init_cols: int | None = None
    growth: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.patch_size not in (4, 8):
            raise ValueError(f"patch_size must be 4 or 8, got {self.patch_size}")
        if self.sparsity < 1 or self.feature_sparsity < 1:
            raise ValueError("sparsity must be >= 1")
        if self.dict_cols < 1 or self.feature_dict_cols < 1:
            raise ValueError("dictionary size must be >= 1")
        for name in ("epsilon_sq", "feature_epsilon_sq"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.target_fpr < 1:
            raise ValueError("target_fpr must lie in (0, 1)")
        if not 0 < self.svd_energy_fraction <= 1:
            raise ValueError("svd_energy_fraction must lie in (0, 1]")
        for name in ("erosion_kernel", "dilation_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1")
        if self.growth < 1:
            raise ValueError("growth must be >= 1")
        if self.dct_dim is not None and self.dct_dim % (self.patch_size**2):
            raise ValueError("dct_dim must be channels * patch_size**2")


def _coerce(raw: str, typ):
    if raw.lower() in ("none", ""):
        return None
    if "int" in str(typ):
        return int(raw)
    return float(raw)


def parse_config(text: str) -> DefenseConfig:
    types = {f.name: f.type for f in fields(DefenseConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, types[key])
    return DefenseConfig(**values)


def load_config(path) -> DefenseConfig:
    return parse_config(Path(path).read_text())
