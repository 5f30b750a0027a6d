"""Image preprocessing: three square-ification schemes plus patch-grid arithmetic.

All transforms are pure functions of their inputs; resampling is plain
bilinear (no antialias tricks beyond what the float-mode kernel does), so
identical inputs always produce bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

SCHEMES = ("resize-crop", "letterbox", "naive-resize")

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


class GranularityError(ValueError):
    """Image side / patch size mismatch."""


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float] = DEFAULT_MEAN
    std: tuple[float, float, float] = DEFAULT_STD

    def __post_init__(self):
        if any(s == 0 for s in self.std):
            raise ValueError("std components must be nonzero")


@dataclass
class RawImage:
    """H x W x 3 uint8 pixel grid."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 image, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("zero-sized image")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def open(cls, path) -> "RawImage":
        with Image.open(path) as im:
            return cls(np.asarray(im.convert("RGB")))

    def save(self, path) -> None:
        Image.fromarray(self.pixels).save(path)


@dataclass
class ProcessedImage:
    """Square, per-channel normalized float grid with scheme provenance."""

    pixels: np.ndarray  # side x side x 3 float32
    scheme: str
    pad_fraction: float = 0.0

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    patches_per_side: int

    @property
    def total_patches(self) -> int:
        return self.patches_per_side**2


def patch_grid(side: int, patch_size: int) -> PatchGrid:
    if patch_size < 1 or side < 1:
        raise ValueError("side and patch_size must be positive")
    if side % patch_size != 0:
        raise GranularityError(f"side {side} not divisible by patch size {patch_size}")
    return PatchGrid(patch_size=patch_size, patches_per_side=side // patch_size)


def _resize_float(channels: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize of an HxWxC float32 array via per-channel PIL 'F' mode."""
    out = np.empty((new_h, new_w, channels.shape[2]), dtype=np.float32)
    for c in range(channels.shape[2]):
        im = Image.fromarray(channels[:, :, c], mode="F")
        out[:, :, c] = np.asarray(im.resize((new_w, new_h), Image.BILINEAR))
    return out


def process_image(
    img: RawImage,
    scheme: str,
    target_side: int,
    norm_stats: NormStats | None = None,
) -> ProcessedImage:
    """Produce a target_side x target_side normalized float image.

    resize-crop: shorter side scaled to target (long side rounded), center
    crop with floored offsets. letterbox: symmetric pad to square (odd
    remainder goes bottom/right), fill = normalization mean, then resize.
    naive-resize: both dimensions scaled independently (warps aspect ratio).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if target_side < 1:
        raise ValueError("target_side must be >= 1")
    stats = norm_stats or NormStats()

    h, w = img.height, img.width
    arr = img.pixels.astype(np.float32) / 255.0
    pad_fraction = 0.0

    if scheme == "resize-crop":
        if h <= w:
            new_h, new_w = target_side, int(round(w * target_side / h))
        else:
            new_h, new_w = int(round(h * target_side / w)), target_side
        if (new_h, new_w) != (h, w):
            arr = _resize_float(arr, new_w, new_h)
        y0 = (new_h - target_side) // 2
        x0 = (new_w - target_side) // 2
        arr = arr[y0 : y0 + target_side, x0 : x0 + target_side, :]
    elif scheme == "letterbox":
        side = max(h, w)
        if side > min(h, w):
            pad_fraction = 1.0 - min(h, w) / max(h, w)
            pad_h, pad_w = side - h, side - w
            top, left = pad_h // 2, pad_w // 2
            bottom, right = pad_h - top, pad_w - left
            fill = np.array(stats.mean, dtype=np.float32)
            padded = np.empty((side, side, 3), dtype=np.float32)
            padded[:, :] = fill
            padded[top : top + h, left : left + w, :] = arr
            arr = padded
        if side != target_side:
            arr = _resize_float(arr, target_side, target_side)
    else:  # naive-resize
        if (h, w) != (target_side, target_side):
            arr = _resize_float(arr, target_side, target_side)

    mean = np.array(stats.mean, dtype=np.float32)
    std = np.array(stats.std, dtype=np.float32)
    arr = (np.ascontiguousarray(arr, dtype=np.float32) - mean) / std
    return ProcessedImage(pixels=arr, scheme=scheme, pad_fraction=pad_fraction)
