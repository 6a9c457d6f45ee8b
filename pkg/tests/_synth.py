"""Deterministic synthetic road scenes for the test suite.

Real driving footage is large and externally licensed, so the tests render
their own: a dark asphalt wedge running from the bottom edge toward a
horizon, grass to the sides, sky above.  The color statistics are chosen so
that a small patch network can actually learn the street/non-street decision
(asphalt is dark and unsaturated, everything else is bright or colorful),
while per-pixel noise keeps the task from being a pure color-key lookup.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from sst.dataset import encode_label

SKY = np.array([0.70, 0.80, 0.95])
GRASS = np.array([0.25, 0.55, 0.20])
ROAD = np.array([0.28, 0.28, 0.30])


def road_scene(height, width, seed=0, noise=0.02, road_scale=1.0):
    """Render one scene; returns (rgb float64 in [0,1], mask uint8).

    The road is a trapezoid whose bottom width, drift and horizon height are
    drawn from `seed`, so different seeds give genuinely different scenes
    while the same seed always reproduces the same pixels.  `road_scale`
    widens (or narrows) the trapezoid without disturbing the seeded draws,
    which is handy when a test wants better street/background balance.
    """
    rng = np.random.default_rng(seed)
    horizon = int(height * rng.uniform(0.35, 0.50))
    bottom_half = width * rng.uniform(0.18, 0.30) * road_scale
    top_half = width * rng.uniform(0.015, 0.04) * road_scale
    center_bottom = width * rng.uniform(0.35, 0.65)
    center_top = center_bottom + width * rng.uniform(-0.15, 0.15)

    rows = np.arange(height, dtype=np.float64)
    t = np.clip((rows - horizon) / max(height - 1 - horizon, 1), 0.0, 1.0)
    center = center_top + (center_bottom - center_top) * t
    half = top_half + (bottom_half - top_half) * t

    cols = np.arange(width, dtype=np.float64)
    on_road = (np.abs(cols[None, :] - center[:, None]) <= half[:, None]) & (
        rows[:, None] >= horizon
    )

    rgb = np.empty((height, width, 3))
    rgb[:] = GRASS
    rgb[rows < horizon] = SKY
    rgb[on_road] = ROAD
    # gentle vertical shading so rows are not identical
    rgb *= (0.9 + 0.2 * (rows / max(height - 1, 1)))[:, None, None]
    rgb += rng.normal(0.0, noise, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0), on_road.astype(np.uint8)


def write_scene_pair(root, image_id, rgb, mask=None):
    """Write one photograph (and optionally its ground truth) in KITTI layout."""
    root = Path(root)
    image_dir = root / "training" / "image_2"
    image_dir.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(image_dir / f"{image_id}.png")
    if mask is not None:
        gt_dir = root / "training" / "gt_image_2"
        gt_dir.mkdir(parents=True, exist_ok=True)
        stem, _, number = image_id.rpartition("_")
        Image.fromarray(encode_label(mask)).save(gt_dir / f"{stem}_road_{number}.png")


def toy_dataset(root, counts=None, size=(64, 96), noise=0.02, with_masks=True):
    """Build a small KITTI-layout dataset; returns the sorted image ids.

    `counts` maps category prefix to image count, default two per category.
    Scene seeds are derived from the id so the corpus is reproducible.
    """
    counts = counts or {"um": 2, "umm": 2, "uu": 2}
    height, width = size
    ids = []
    for offset, category in enumerate(sorted(counts)):
        for i in range(counts[category]):
            image_id = f"{category}_{i:06d}"
            rgb, mask = road_scene(height, width, seed=1000 * offset + i,
                                   noise=noise)
            write_scene_pair(root, image_id, rgb, mask if with_masks else None)
            ids.append(image_id)
    return sorted(ids)


def frame_sequence(directory, count=3, size=(64, 96), start_seed=50):
    """Write a directory of plain PNG frames (no ground truth); returns paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rgb, _ = road_scene(*size, seed=start_seed + i)
        arr = np.round(rgb * 255.0).astype(np.uint8)
        path = directory / f"frame_{i:04d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
