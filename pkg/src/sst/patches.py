"""Patch extraction: stride-spaced center grids, padding, training patches.

A patch is an n×n image section centered on a grid point.  Adjacent centers
are `stride` apart, so adjacent patches overlap by n − stride pixels.  The
grid origin is ⌊s/2⌋, which centers the coverage; the last center per axis
is pulled back to the final pixel when the regular progression would step
outside, so the grid always has exactly ⌈extent/s⌉ centers per axis and
every pixel lies within ⌊s/2⌋ of a center.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError

EDGE = "edge"
ZERO = "zero"


@dataclass(frozen=True)
class PatchSpec:
    n: int = 51
    stride: int = 10
    fully: bool = False

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ArgumentError(f"patch size must be odd and positive, got {self.n}")
        if not 1 <= self.stride <= self.n:
            raise ArgumentError(
                f"stride must be in [1, {self.n}], got {self.stride}"
            )

    @property
    def margin(self):
        return self.n // 2


@dataclass
class Patch:
    pixels: np.ndarray        # (n, n, 3)
    center: tuple             # (row, col) in source-image coordinates
    label: object             # scalar 0/1, or (n, n) uint8 when fully


def pad_image(image, margin, mode=EDGE):
    """Add `margin` rows/columns on every side of an (H,W) or (H,W,C) array."""
    if margin < 0:
        raise ArgumentError(f"margin must be >= 0, got {margin}")
    if margin == 0:
        return np.asarray(image)
    image = np.asarray(image)
    pad = [(margin, margin), (margin, margin)] + [(0, 0)] * (image.ndim - 2)
    if mode == EDGE:
        return np.pad(image, pad, mode="edge")
    if mode == ZERO:
        return np.pad(image, pad)
    raise ArgumentError(f"unknown padding mode {mode!r}")


def center_axis(extent, stride):
    """Stride-spaced center coordinates along one axis of `extent` pixels."""
    if extent < 1:
        raise ArgumentError(f"extent must be >= 1, got {extent}")
    count = -(-extent // stride)
    centers = stride // 2 + stride * np.arange(count)
    return np.minimum(centers, extent - 1)


def center_grid(height, width, spec):
    """All patch centers for an image, row-major."""
    rows = center_axis(height, spec.stride)
    cols = center_axis(width, spec.stride)
    return [(int(r), int(c)) for r in rows for c in cols]


def patch_count(height, width, stride):
    return (-(-height // stride)) * (-(-width // stride))


def extract_patch_arrays(image, spec, pad_mode=EDGE, cap=None):
    """Vectorized patch extraction.

    Returns (pixels, labels, centers): pixels is (P, n, n, 3); labels is
    (P,) for center-pixel patches or (P, n, n) when spec.fully; centers is
    (P, 2) source-image coordinates in row-major grid order.  `cap` keeps at
    most that many patches, sampled evenly across the grid.
    """
    n = spec.n
    h, w = image.rgb.shape[:2]
    rows = center_axis(h, spec.stride)
    cols = center_axis(w, spec.stride)
    padded = pad_image(image.rgb, spec.margin, pad_mode)

    win = np.lib.stride_tricks.sliding_window_view(padded, (n, n), axis=(0, 1))
    pixels = win[rows][:, cols]                   # (R, C, 3, n, n)
    pixels = pixels.transpose(0, 1, 3, 4, 2).reshape(-1, n, n, 3)

    if image.mask is None:
        raise ArgumentError(f"image {image.id} has no ground-truth mask to train on")
    if spec.fully:
        mpad = pad_image(image.mask, spec.margin, pad_mode)
        mwin = np.lib.stride_tricks.sliding_window_view(mpad, (n, n))
        labels = mwin[rows][:, cols].reshape(-1, n, n).astype(np.uint8)
    else:
        labels = image.mask[np.ix_(rows, cols)].reshape(-1).astype(np.uint8)

    centers = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)

    if cap is not None and cap < len(pixels):
        keep = np.unique(np.linspace(0, len(pixels) - 1, cap).round().astype(int))
        pixels, labels, centers = pixels[keep], labels[keep], centers[keep]
    return np.ascontiguousarray(pixels), labels, centers


def extract_training_patches(image, spec, pad_mode=EDGE, cap=None):
    """Patch objects for one image (row-major center order)."""
    pixels, labels, centers = extract_patch_arrays(image, spec, pad_mode, cap)
    return [
        Patch(pixels=pixels[i], center=(int(centers[i, 0]), int(centers[i, 1])),
              label=labels[i] if spec.fully else int(labels[i]))
        for i in range(len(pixels))
    ]


# ---------------------------------------------------------------------------
# patch cache
# ---------------------------------------------------------------------------

def cache_key(images, spec, pad_mode=EDGE):
    """Content hash identifying a (dataset, spec) patch set."""
    h = hashlib.sha256()
    h.update(f"n={spec.n};s={spec.stride};fully={spec.fully};pad={pad_mode}".encode())
    for img in images:
        h.update(img.id.encode())
        h.update(np.ascontiguousarray(img.rgb).tobytes())
        if img.mask is not None:
            h.update(np.ascontiguousarray(img.mask).tobytes())
    return h.hexdigest()


def save_patch_cache(cache_dir, key, pixels, labels, centers):
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"patches-{key}.npz"
    np.savez(path, pixels=pixels, labels=labels, centers=centers)
    return path


def load_patch_cache(cache_dir, key):
    path = Path(cache_dir) / f"patches-{key}.npz"
    if not path.is_file():
        return None
    with np.load(path) as data:
        return data["pixels"], data["labels"], data["centers"]
