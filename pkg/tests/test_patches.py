"""Patch-grid geometry and extraction tests.

The coverage and count properties are checked against brute force over all
small image extents, which is feasible because the grid is separable.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sst.patches as patches
from sst.dataset import LabeledImage
from sst.errors import ArgumentError


def _image(h, w, seed=0, with_mask=True):
    rng = np.random.default_rng(seed)
    return LabeledImage(
        id=f"um_{seed:06d}", category="um",
        rgb=rng.random((h, w, 3)),
        mask=rng.integers(0, 2, size=(h, w)).astype(np.uint8) if with_mask else None,
    )


def test_patch_spec_defaults_and_margin():
    spec = patches.PatchSpec()
    assert (spec.n, spec.stride, spec.fully) == (51, 10, False)
    assert spec.margin == 25


@pytest.mark.parametrize("n,stride", [(0, 1), (4, 1), (-3, 1), (5, 0), (5, 6), (5, -1)])
def test_patch_spec_rejects_bad_values(n, stride):
    with pytest.raises(ArgumentError):
        patches.PatchSpec(n=n, stride=stride)


# ---------------------------------------------------------------------------
# center grid geometry
# ---------------------------------------------------------------------------

def test_center_axis_regular_progression():
    np.testing.assert_array_equal(patches.center_axis(100, 10),
                                  [5, 15, 25, 35, 45, 55, 65, 75, 85, 95])


def test_center_axis_clamps_final_center():
    # 375 rows at stride 10: the 38th center would be 375, one past the edge
    axis = patches.center_axis(375, 10)
    assert len(axis) == 38
    assert axis[-2:].tolist() == [365, 374]


def test_center_axis_exhaustive_coverage_and_count():
    # brute force every small extent/stride combination
    for extent in range(1, 61):
        for stride in range(1, 12):
            axis = patches.center_axis(extent, stride)
            assert len(axis) == -(-extent // stride)            # exactly ceil(e/s)
            assert len(set(axis.tolist())) == len(axis)         # all distinct
            assert axis.min() >= 0 and axis.max() == min(stride // 2 + stride * (len(axis) - 1), extent - 1)
            assert (np.diff(axis) > 0).all()                    # strictly increasing
            # every pixel within floor(s/2) of some center
            dist = np.abs(np.arange(extent)[:, None] - axis[None, :]).min(axis=1)
            assert dist.max() <= stride // 2


def test_center_grid_row_major():
    spec = patches.PatchSpec(n=5, stride=4)
    grid = patches.center_grid(9, 6, spec)
    rows = patches.center_axis(9, 4).tolist()
    cols = patches.center_axis(6, 4).tolist()
    assert grid == [(r, c) for r in rows for c in cols]


@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(1, 51))
@settings(max_examples=200, deadline=None)
def test_patch_count_formula(h, w, stride):
    assert patches.patch_count(h, w, stride) == int(np.ceil(h / stride) * np.ceil(w / stride))


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------

def test_pad_image_edge_replicates_border():
    img = np.arange(6, dtype=float).reshape(2, 3)
    out = patches.pad_image(img, 1, patches.EDGE)
    assert out.shape == (4, 5)
    assert out[0, 0] == img[0, 0] and out[-1, -1] == img[-1, -1]


def test_pad_image_zero_mode():
    img = np.ones((2, 2, 3))
    out = patches.pad_image(img, 2, patches.ZERO)
    assert out.shape == (6, 6, 3)
    assert out[0].sum() == 0 and out[:, 0].sum() == 0


def test_pad_image_rejects_unknown_mode():
    with pytest.raises(ArgumentError):
        patches.pad_image(np.zeros((2, 2)), 1, "reflect")
    with pytest.raises(ArgumentError):
        patches.pad_image(np.zeros((2, 2)), -1)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def test_extracted_patch_is_window_around_center():
    img = _image(20, 30, seed=1)
    spec = patches.PatchSpec(n=5, stride=4)
    pixels, labels, centers = patches.extract_patch_arrays(img, spec)
    padded = patches.pad_image(img.rgb, spec.margin)
    for i, (r, c) in enumerate(centers):
        # center (r, c) in source coords = (r, c) offset in padded coords
        window = padded[r : r + spec.n, c : c + spec.n]
        np.testing.assert_array_equal(pixels[i], window)
        assert labels[i] == img.mask[r, c]


def test_extraction_matches_object_api():
    img = _image(13, 17, seed=2)
    spec = patches.PatchSpec(n=5, stride=3)
    arr_pixels, arr_labels, arr_centers = patches.extract_patch_arrays(img, spec)
    objs = patches.extract_training_patches(img, spec)
    assert len(objs) == len(arr_pixels) == patches.patch_count(13, 17, 3)
    for i, p in enumerate(objs):
        np.testing.assert_array_equal(p.pixels, arr_pixels[i])
        assert p.center == tuple(arr_centers[i])
        assert p.label == arr_labels[i]


def test_fully_labels_are_windows():
    img = _image(16, 14, seed=3)
    spec = patches.PatchSpec(n=5, stride=4, fully=True)
    _, labels, centers = patches.extract_patch_arrays(img, spec)
    mpad = patches.pad_image(img.mask, spec.margin)
    assert labels.shape == (len(centers), 5, 5)
    for i, (r, c) in enumerate(centers):
        np.testing.assert_array_equal(labels[i], mpad[r : r + 5, c : c + 5])


def test_zero_padding_shows_in_border_patches():
    img = _image(8, 8, seed=4)
    spec = patches.PatchSpec(n=5, stride=5)
    pixels, _, centers = patches.extract_patch_arrays(img, spec, pad_mode=patches.ZERO)
    padded = patches.pad_image(img.rgb, spec.margin, patches.ZERO)
    for i, (r, c) in enumerate(centers):
        np.testing.assert_array_equal(pixels[i], padded[r : r + 5, c : c + 5])
    # the corner patch hangs over the edge and really contains zeros
    assert pixels[-1][-1].sum() == 0


def test_cap_subsamples_evenly():
    img = _image(30, 30, seed=5)
    spec = patches.PatchSpec(n=3, stride=3)
    full_pixels, _, full_centers = patches.extract_patch_arrays(img, spec)
    pixels, _, centers = patches.extract_patch_arrays(img, spec, cap=10)
    assert len(pixels) == 10 < len(full_pixels)
    assert centers[0].tolist() == full_centers[0].tolist()
    assert centers[-1].tolist() == full_centers[-1].tolist()


def test_extraction_requires_mask():
    img = _image(10, 10, with_mask=False)
    with pytest.raises(ArgumentError, match="mask"):
        patches.extract_patch_arrays(img, patches.PatchSpec(n=3, stride=3))


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------

def test_cache_round_trip(tmp_path):
    img = _image(12, 12, seed=6)
    spec = patches.PatchSpec(n=5, stride=4)
    pixels, labels, centers = patches.extract_patch_arrays(img, spec)
    key = patches.cache_key([img], spec)
    assert patches.load_patch_cache(tmp_path, key) is None
    patches.save_patch_cache(tmp_path, key, pixels, labels, centers)
    cached = patches.load_patch_cache(tmp_path, key)
    assert cached is not None
    np.testing.assert_array_equal(cached[0], pixels)
    np.testing.assert_array_equal(cached[1], labels)
    np.testing.assert_array_equal(cached[2], centers)


def test_cache_key_sensitive_to_content_and_spec():
    img_a, img_b = _image(10, 10, seed=7), _image(10, 10, seed=8)
    spec = patches.PatchSpec(n=5, stride=4)
    assert patches.cache_key([img_a], spec) != patches.cache_key([img_b], spec)
    assert patches.cache_key([img_a], spec) != patches.cache_key(
        [img_a], patches.PatchSpec(n=5, stride=2)
    )
    assert patches.cache_key([img_a], spec) == patches.cache_key([img_a], spec)
