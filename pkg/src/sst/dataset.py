"""KITTI-layout dataset loading, label decoding and train/test splitting.

A dataset root contains ``training/image_2`` (photographs) and
``training/gt_image_2`` (color-coded ground truth).  Ground truth for an
image ``um_000042.png`` is looked up as ``um_road_000042.png`` first (the
KITTI road-benchmark naming) and as ``um_000042.png`` second.

Label color coding: magenta ``#ff00ff`` is the ego street (positive class),
red ``#ff0000`` is non-street, black ``#000000`` marks other streets and is
also treated as negative — the models segment only the street the recording
car drives on.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArgumentError, FormatError

CATEGORIES = ("um", "umm", "uu")

# Image dimensions occurring in the KITTI road base kit.
KITTI_WIDTHS = frozenset({1226, 1238, 1241, 1242})
KITTI_HEIGHTS = frozenset({370, 374, 375, 376})

STREET_COLOR = (255, 0, 255)
NON_STREET_COLOR = (255, 0, 0)
OTHER_STREET_COLOR = (0, 0, 0)


@dataclass
class LabeledImage:
    id: str
    category: str
    rgb: np.ndarray          # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray | None  # (H, W) uint8 in {0, 1}, None when not loaded

    @property
    def shape(self):
        return self.rgb.shape[:2]


@dataclass
class DatasetSplit:
    train: list[str]
    test: list[str]
    seed: int
    test_fraction: float = 0.2

    def manifest(self):
        return {
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "train": list(self.train),
            "test": list(self.test),
        }


def decode_label(gt_rgb):
    """Map a color-coded ground-truth image to a binary street mask.

    Any pixel that is not one of the three documented colors raises a
    FormatError naming the first offending coordinate and its color.
    """
    arr = np.asarray(gt_rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"ground truth must be H x W x 3, got shape {arr.shape}")
    arr = arr.astype(np.uint32)
    code = (arr[..., 0] << 16) | (arr[..., 1] << 8) | arr[..., 2]
    street = code == 0xFF00FF
    valid = street | (code == 0xFF0000) | (code == 0x000000)
    if not valid.all():
        r, c = np.argwhere(~valid)[0]
        raise FormatError(
            f"pixel ({r}, {c}) has color #{code[r, c]:06x}; "
            "expected #ff00ff, #ff0000 or #000000"
        )
    return street.astype(np.uint8)


def encode_label(mask):
    """Inverse of decode_label on masks: 1 -> magenta, 0 -> red."""
    mask = np.asarray(mask)
    out = np.zeros(mask.shape + (3,), dtype=np.uint8)
    out[..., 0] = 255
    out[mask.astype(bool), 2] = 255
    return out


def halve_rgb(rgb):
    """Downscale by 2 per axis with a 2x2 box average (odd edges dropped)."""
    h, w = rgb.shape[:2]
    h2, w2 = h // 2, w // 2
    c = rgb[: 2 * h2, : 2 * w2]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def halve_mask(mask):
    """Downscale a mask by taking the top-left sample of each 2x2 block."""
    h, w = mask.shape
    return mask[: 2 * (h // 2) : 2, : 2 * (w // 2) : 2]


def _read_rgb(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _image_dir(root):
    return Path(root) / "training" / "image_2"


def _gt_dir(root):
    return Path(root) / "training" / "gt_image_2"


def _gt_path(root, image_id):
    stem, _, number = image_id.rpartition("_")
    for name in (f"{stem}_road_{number}.png", f"{image_id}.png"):
        candidate = _gt_dir(root) / name
        if candidate.is_file():
            return candidate
    return None


def list_image_ids(root):
    """Sorted ids of all PNG photographs below the root."""
    image_dir = _image_dir(root)
    if not image_dir.is_dir():
        raise FormatError(f"{image_dir} does not exist (expected KITTI layout)")
    return sorted(p.stem for p in image_dir.glob("*.png"))


def category_of(image_id):
    prefix = image_id.split("_", 1)[0]
    if prefix not in CATEGORIES:
        raise FormatError(
            f"image id {image_id!r} does not start with one of {CATEGORIES}"
        )
    return prefix


def load_pair(root, image_id, half_size=False, with_mask=True):
    """Load one photograph (and, when available, its ground-truth mask)."""
    path = _image_dir(root) / f"{image_id}.png"
    raw = _read_rgb(path)
    h, w = raw.shape[:2]
    if w not in KITTI_WIDTHS or h not in KITTI_HEIGHTS:
        warnings.warn(f"image {image_id}: size {w}x{h} is not a KITTI base-kit size")
    rgb = raw.astype(np.float64) / 255.0
    mask = None
    if with_mask:
        gt = _gt_path(root, image_id)
        if gt is not None:
            decoded = decode_label(_read_rgb(gt))
            if decoded.shape != rgb.shape[:2]:
                raise FormatError(
                    f"{image_id}: ground truth shape {decoded.shape} does not "
                    f"match image shape {rgb.shape[:2]}"
                )
            mask = decoded
    if half_size:
        rgb = halve_rgb(rgb)
        if mask is not None:
            mask = halve_mask(mask)
    return LabeledImage(id=image_id, category=category_of(image_id), rgb=rgb, mask=mask)


def load_dataset(root, half_size=False, with_masks=True):
    """Load every image/ground-truth pair below a KITTI-layout root.

    Returns LabeledImages in lexicographic id order.  With ``with_masks``
    every image must have ground truth; all ids lacking it are collected and
    reported in a single FormatError.  ``with_masks=False`` loads the
    photographs only (prediction-only mode).
    """
    ids = list_image_ids(root)
    if not ids:
        warnings.warn(f"no images found under {_image_dir(root)}")
        return []
    if with_masks:
        missing = [i for i in ids if _gt_path(root, i) is None]
        if missing:
            raise FormatError(
                "missing ground truth for: " + ", ".join(missing)
            )
    return [load_pair(root, i, half_size=half_size, with_mask=with_masks)
            for i in ids]


def split_dataset(images, test_fraction=0.2, seed=0):
    """Deterministic, category-stratified train/test split of image ids.

    The overall test share hits round(test_fraction * len(images)) exactly;
    each category's share is proportional to within one image
    (largest-remainder apportionment).
    """
    if not 0.0 < test_fraction < 1.0:
        raise ArgumentError(f"test fraction must be in (0, 1), got {test_fraction}")
    if not images:
        raise ArgumentError("cannot split an empty dataset")

    by_category = {}
    for img in images:
        by_category.setdefault(img.category, []).append(img.id)
    for ids in by_category.values():
        ids.sort()

    target = round(test_fraction * len(images))
    quotas = {}
    remainders = []
    for cat in sorted(by_category):
        exact = test_fraction * len(by_category[cat])
        quotas[cat] = int(exact)
        remainders.append((-(exact - int(exact)), cat))
    remainders.sort()
    leftover = target - sum(quotas.values())
    for _, cat in remainders[:leftover]:
        quotas[cat] += 1

    rng = np.random.default_rng(seed)
    train, test = [], []
    for cat in sorted(by_category):
        ids = by_category[cat]
        order = rng.permutation(len(ids))
        picked = set(order[: quotas[cat]].tolist())
        for i, image_id in enumerate(ids):
            (test if i in picked else train).append(image_id)
    return DatasetSplit(train=train, test=test, seed=seed, test_fraction=test_fraction)


def write_split(path, split):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.manifest(), fh, indent=2)
        fh.write("\n")


def read_split(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        return DatasetSplit(
            train=list(data["train"]),
            test=list(data["test"]),
            seed=int(data["seed"]),
            test_fraction=float(data["test_fraction"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed split manifest {path}: {exc}") from exc
