"""Whole-image segmentation from a trained model.

Two evaluators share the same chunked patch engine:

* sliding window (center-pixel models): every stride-spaced grid center is
  classified and the remaining pixels copy their nearest evaluated center
  (Chebyshev distance; ties prefer the smaller row, then column).
* patch stitching (full-patch models): the image is divided into n×n
  patches whose top-left corners are stride-spaced; where patches overlap,
  each pixel takes the prediction of the patch whose center is nearest
  (Euclidean distance; ties prefer the lexicographically smaller center).

Patches are evaluated in fixed-size chunks that are zero-padded to a
constant batch shape, so every pixel's probability is bit-identical no
matter how the work is ordered or spread over workers — each chunk is a
pure function of its own patches.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import nn
from .errors import ArgumentError, ConfigError, DimensionError, NumericError, StateError
from .patches import EDGE, center_axis, pad_image

CHUNK = 64  # patches per evaluation chunk; fixed so batch shapes never vary


@dataclass
class SegmentationResult:
    probabilities: np.ndarray  # (H, W) float64 in [0, 1]
    mask: np.ndarray           # (H, W) uint8 in {0, 1}
    eval_stride: int
    elapsed: float             # seconds of pure segmentation work
    patch_evaluations: int


def round_probabilities(probabilities, threshold=0.5):
    """Binary mask from a probability field; `threshold` itself rounds to 1."""
    p = np.asarray(probabilities)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        bad = p.min() if p.min() < 0.0 else p.max()
        raise NumericError(f"probability {bad} outside [0, 1]")
    return (p >= threshold).astype(np.uint8)


def _image_rgb(image):
    rgb = image.rgb if hasattr(image, "rgb") else np.asarray(image, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    return rgb


def _check_model(model, fully, stride):
    if model.fully != fully:
        kind = "full-patch" if fully else "center-pixel"
        raise ConfigError(
            f"model {model.name!r} (fully={model.fully}) cannot run the "
            f"{kind} evaluator"
        )
    if not model.trained:
        raise StateError(f"model {model.name!r} has no weights; train it first")
    if not 1 <= stride <= model.patch_size:
        raise ArgumentError(
            f"evaluation stride must be in [1, {model.patch_size}], got {stride}"
        )


def _predict_chunks(layers, get_batch, total, out_len, workers):
    """Evaluate `total` patches in fixed chunks; returns (total, out_len).

    get_batch(lo, hi) must return patches lo:hi as an (m, n, n, 3) array.
    Every chunk is padded to exactly CHUNK patches before the forward pass,
    keeping all array shapes constant.
    """
    nchunks = -(-total // CHUNK)

    def run(ci):
        lo = ci * CHUNK
        hi = min(lo + CHUNK, total)
        xb = get_batch(lo, hi)
        if hi - lo < CHUNK:
            pad = np.zeros((CHUNK - (hi - lo),) + xb.shape[1:], dtype=xb.dtype)
            xb = np.concatenate([xb, pad])
        out, _ = nn.forward_network(layers, xb, keep_caches=False)
        return out.reshape(CHUNK, -1)[: hi - lo]

    if workers and workers > 1 and nchunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(nchunks)))
    else:
        parts = [run(ci) for ci in range(nchunks)]
    out = np.concatenate(parts) if parts else np.zeros((0, out_len))
    if out.shape[1] != out_len:
        raise DimensionError(
            f"model produced {out.shape[1]} outputs per patch, expected {out_len}"
        )
    return out


def _window_batcher(padded, tops_r, tops_c, n):
    """Chunk extractor over the n×n windows whose top-left corners are
    (tops_r × tops_c), in row-major order."""
    win = np.lib.stride_tricks.sliding_window_view(padded, (n, n), axis=(0, 1))
    ncols = len(tops_c)

    def get_batch(lo, hi):
        flat = np.arange(lo, hi)
        xb = win[tops_r[flat // ncols], tops_c[flat % ncols]]
        return np.ascontiguousarray(xb.transpose(0, 2, 3, 1), dtype=nn.DTYPE)

    return get_batch


def _nearest_axis_distance(extent, centers):
    """Per-coordinate distance to the nearest center along one axis."""
    pos = np.arange(extent)
    idx = np.searchsorted(centers, pos)
    left = centers[np.clip(idx - 1, 0, len(centers) - 1)]
    right = centers[np.clip(idx, 0, len(centers) - 1)]
    return np.minimum(np.abs(pos - left), np.abs(pos - right))


def _nearest_axis_owner(extent, centers):
    """Index of the nearest center per coordinate; ties take the smaller."""
    pos = np.arange(extent)
    idx = np.searchsorted(centers, pos)
    left = np.clip(idx - 1, 0, len(centers) - 1)
    right = np.clip(idx, 0, len(centers) - 1)
    take_left = np.abs(pos - centers[left]) <= np.abs(pos - centers[right])
    return np.where(take_left, left, right)


def segment_sliding_window(model, image, stride, workers=1, pad_mode=EDGE):
    """Classify stride-spaced centers; fill the rest by nearest-center copy."""
    _check_model(model, fully=False, stride=stride)
    rgb = _image_rgb(image)
    h, w = rgb.shape[:2]
    n = model.patch_size

    start = time.perf_counter()
    rows = center_axis(h, stride)
    cols = center_axis(w, stride)
    padded = pad_image(rgb, n // 2, pad_mode)
    # Window at source center (r, c) starts at (r, c) in padded coordinates.
    get_batch = _window_batcher(padded, rows, cols, n)
    out = _predict_chunks(model.layers, get_batch, len(rows) * len(cols), 1, workers)
    lattice = out.reshape(len(rows), len(cols))

    # Chebyshev nearest evaluated center: the attainable minimum for a pixel
    # is D = max(row-axis minimum, column-axis minimum); the winner under the
    # smaller-row-then-column tie rule is the first center of each axis
    # within ±D of the pixel.
    dist = np.maximum(
        _nearest_axis_distance(h, rows)[:, None],
        _nearest_axis_distance(w, cols)[None, :],
    )
    row_idx = np.searchsorted(rows, np.arange(h)[:, None] - dist)
    col_idx = np.searchsorted(cols, np.arange(w)[None, :] - dist)
    probabilities = lattice[row_idx, col_idx]
    mask = round_probabilities(probabilities)
    elapsed = time.perf_counter() - start
    return SegmentationResult(
        probabilities=probabilities, mask=mask, eval_stride=stride,
        elapsed=elapsed, patch_evaluations=len(rows) * len(cols),
    )


def regression_tops(extent, stride):
    """Top-left offsets of the stitching grid along one axis."""
    return stride * np.arange(-(-extent // stride))


def regression_owners(extent, n, stride):
    """(owner index, local coordinate) per pixel along one axis."""
    tops = regression_tops(extent, stride)
    centers = tops + n // 2
    own = _nearest_axis_owner(extent, centers)
    local = np.arange(extent) - tops[own]
    return own, local


def segment_regression(model, image, stride, workers=1, pad_mode=EDGE):
    """Evaluate full n×n patch predictions and stitch by nearest center."""
    _check_model(model, fully=True, stride=stride)
    rgb = _image_rgb(image)
    h, w = rgb.shape[:2]
    n = model.patch_size

    start = time.perf_counter()
    tops_r = regression_tops(h, stride)
    tops_c = regression_tops(w, stride)
    # Edge patches may reach past the image; extend it far enough.
    pad_b = int(tops_r[-1]) + n - h
    pad_r = int(tops_c[-1]) + n - w
    spec = [(0, max(pad_b, 0)), (0, max(pad_r, 0)), (0, 0)]
    padded = np.pad(rgb, spec, mode="edge" if pad_mode == EDGE else "constant")

    get_batch = _window_batcher(padded, tops_r, tops_c, n)
    out = _predict_chunks(model.layers, get_batch,
                          len(tops_r) * len(tops_c), n * n, workers)
    patch_maps = out.reshape(len(tops_r), len(tops_c), n, n)

    own_r, local_r = regression_owners(h, n, stride)
    own_c, local_c = regression_owners(w, n, stride)
    probabilities = patch_maps[own_r[:, None], own_c[None, :],
                               local_r[:, None], local_c[None, :]]
    mask = round_probabilities(probabilities)
    elapsed = time.perf_counter() - start
    return SegmentationResult(
        probabilities=probabilities, mask=mask, eval_stride=stride,
        elapsed=elapsed, patch_evaluations=len(tops_r) * len(tops_c),
    )


def timed_segment(model, image, stride, workers=1, pad_mode=EDGE):
    """Segment with whichever evaluator the model's `fully` flag selects."""
    if model.fully:
        return segment_regression(model, image, stride, workers, pad_mode)
    return segment_sliding_window(model, image, stride, workers, pad_mode)


def stitch_difference_region(h, w, n, stride_a, stride_b):
    """Pixels whose owning patch window differs between two stitching strides.

    Outside this region both strides evaluate the model on identical
    windows at identical local offsets, so their outputs agree exactly.
    """
    own_ra, local_ra = regression_owners(h, n, stride_a)
    own_rb, local_rb = regression_owners(h, n, stride_b)
    own_ca, local_ca = regression_owners(w, n, stride_a)
    own_cb, local_cb = regression_owners(w, n, stride_b)
    tops_diff_r = (regression_tops(h, stride_a)[own_ra]
                   != regression_tops(h, stride_b)[own_rb])
    tops_diff_c = (regression_tops(w, stride_a)[own_ca]
                   != regression_tops(w, stride_b)[own_cb])
    return tops_diff_r[:, None] | tops_diff_c[None, :]


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

GREEN = np.array([0.0, 1.0, 0.0])
BLUE = np.array([0.0, 0.0, 1.0])
RED = np.array([1.0, 0.0, 0.0])


def render_overlay(image, predicted, truth=None, alpha=0.5):
    """Blend the confusion classes over the photograph.

    With ground truth: true positives green, false positives blue, false
    negatives red; true negatives stay untouched.  Without ground truth the
    predicted street is blended green.
    """
    rgb = _image_rgb(image)
    pred = np.asarray(predicted).astype(bool)
    if pred.shape != rgb.shape[:2]:
        raise DimensionError(
            f"mask shape {pred.shape} does not match image shape {rgb.shape[:2]}"
        )
    out = rgb.copy()
    if truth is None:
        out[pred] = (1 - alpha) * out[pred] + alpha * GREEN
        return out
    t = np.asarray(truth).astype(bool)
    if t.shape != pred.shape:
        raise DimensionError(
            f"truth shape {t.shape} does not match mask shape {pred.shape}"
        )
    for region, color in ((pred & t, GREEN), (pred & ~t, BLUE), (~pred & t, RED)):
        out[region] = (1 - alpha) * out[region] + alpha * color
    return out


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_probability_png(path, probabilities):
    """Probability map as 16-bit grayscale PNG (0.0 -> 0, 1.0 -> 65535)."""
    q = np.round(np.asarray(probabilities) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)  # uint16 maps to mode I;16


def read_probability_png(path):
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.uint16)


def write_mask_png(path, mask):
    """Binary mask as 1-bit PNG."""
    Image.fromarray(np.asarray(mask).astype(bool)).save(path)


def read_mask_png(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("1"), dtype=np.uint8)


def write_overlay_png(path, overlay):
    arr = np.clip(np.asarray(overlay), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def write_sidecar(path, model_name, result):
    data = {
        "model": model_name,
        "stride": result.eval_stride,
        "elapsed_ms": result.elapsed * 1000.0,
        "patch_evaluations": result.patch_evaluations,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")
    return data
