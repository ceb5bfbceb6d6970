"""Embedder and synthetic-corpus tests.

The embedder must be bit-for-bit deterministic; most assertions here are
exact equalities, not tolerances.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchseek.embed import (
    ImageRecord,
    PatchEntry,
    best_patch_for_box,
    embed_image,
    normalize,
    synth_dataset,
    toy_embed,
)
from patchseek.embed import _pool, _resize_bilinear
from patchseek.geometry import (
    NormRect,
    PatchLevel,
    PixelBox,
    grid_patches,
    iou,
    to_pixel,
)

FULL = NormRect(0.0, 0.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# normalize


def test_normalize_fixture():
    out = normalize(np.array([3.0, 4.0]))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, [0.6, 0.8], rtol=0, atol=1e-7)


def test_normalize_rejects_zero_and_nonfinite():
    with pytest.raises(ValueError):
        normalize(np.zeros(8))
    with pytest.raises(ValueError):
        normalize(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        normalize(np.array([np.inf, 1.0]))


@settings(max_examples=200)
@given(
    st.lists(
        st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
        min_size=1,
        max_size=32,
    ).filter(lambda xs: any(x != 0.0 for x in xs))
)
def test_normalize_unit_norm(xs):
    out = normalize(np.array(xs))
    assert abs(float(np.linalg.norm(out.astype(np.float64))) - 1.0) < 1e-6


# ---------------------------------------------------------------------------
# pooling


def _pool_oracle(crop: np.ndarray) -> np.ndarray:
    """Per-cell slice means, written independently of the integral image."""
    h, w = crop.shape
    out = np.zeros((16, 16))
    for i in range(16):
        for j in range(16):
            r0, r1 = (i * h) // 16, -((-(i + 1) * h) // 16)
            c0, c1 = (j * w) // 16, -((-(j + 1) * w) // 16)
            out[i, j] = np.mean(crop[r0:r1, c0:c1], dtype=np.float64)
    return out


@pytest.mark.parametrize("shape", [(16, 16), (17, 23), (5, 40), (1, 1), (64, 3)])
def test_pool_matches_slice_means(shape):
    rng = np.random.default_rng(11)
    crop = rng.random(shape)
    got = _pool(crop)
    np.testing.assert_allclose(got, _pool_oracle(crop), rtol=1e-12, atol=1e-12)


def test_pool_cells_never_empty():
    # smallest possible crop still fills every cell with its one pixel
    out = _pool(np.full((1, 1), 0.25))
    assert out.shape == (16, 16)
    np.testing.assert_array_equal(out, np.full((16, 16), 0.25))


# ---------------------------------------------------------------------------
# toy_embed


def test_toy_embed_deterministic_bits():
    rng = np.random.default_rng(0)
    img = rng.random((48, 48))
    a = toy_embed(img, NormRect(0.1, 0.2, 0.9, 0.8), 32, seed=5)
    b = toy_embed(img.copy(), NormRect(0.1, 0.2, 0.9, 0.8), 32, seed=5)
    assert a.dtype == np.float32 and a.shape == (32,)
    assert np.array_equal(a, b)


def test_toy_embed_seed_and_dim_matter():
    img = np.random.default_rng(1).random((32, 32))
    base = toy_embed(img, FULL, 16, seed=2)
    assert not np.array_equal(base, toy_embed(img, FULL, 16, seed=3))
    assert toy_embed(img, FULL, 24, seed=2).shape == (24,)


def test_toy_embed_constant_image_region_invariant():
    # a constant image pools to the same vector for every region
    img = np.full((40, 40), 0.5)
    ref = toy_embed(img, FULL, 16, seed=9)
    for region in grid_patches(PatchLevel.L3).regions:
        assert np.array_equal(toy_embed(img, region, 16, seed=9), ref)


def test_toy_embed_subregion_equals_cropped_full():
    img = np.random.default_rng(4).random((64, 64))
    sub = toy_embed(img, NormRect(0.0, 0.0, 0.5, 0.5), 32, seed=8)
    crop = toy_embed(img[:32, :32], FULL, 32, seed=8)
    assert np.array_equal(sub, crop)


def test_toy_embed_integer_translation_covariant():
    # same tile blitted at two grid-aligned spots gives identical crops,
    # hence identical descriptors for the corresponding regions
    tile = np.random.default_rng(6).random((32, 32))
    a = np.zeros((64, 64))
    b = np.zeros((64, 64))
    a[:32, :32] = tile
    b[32:, 32:] = tile
    da = toy_embed(a, NormRect(0.0, 0.0, 0.5, 0.5), 48, seed=1)
    db = toy_embed(b, NormRect(0.5, 0.5, 1.0, 1.0), 48, seed=1)
    assert np.array_equal(da, db)


def test_toy_embed_rejects_non_2d():
    with pytest.raises(ValueError):
        toy_embed(np.zeros((4, 4, 3)), FULL, 8, seed=0)


# ---------------------------------------------------------------------------
# embed_image records


def test_embed_image_ids_and_norms():
    img = np.random.default_rng(3).random((30, 20))
    rec = embed_image("a", img, grid_patches(PatchLevel.L2), 16, seed=2)
    assert rec.width == 20 and rec.height == 30
    assert [e.patch_id for e in rec.entries] == list(range(14))
    for e in rec.entries:
        assert abs(float(np.linalg.norm(e.descriptor.astype(np.float64))) - 1.0) < 1e-6
        # regions are stored at float32 precision
        for v in (e.region.x0, e.region.y0, e.region.x1, e.region.y1):
            assert v == float(np.float32(v))


def test_record_equality_is_content_based():
    img = np.random.default_rng(7).random((16, 16))
    rec1 = embed_image("a", img, grid_patches(PatchLevel.L1), 8, seed=1)
    rec2 = embed_image("a", img, grid_patches(PatchLevel.L1), 8, seed=1)
    assert rec1 == rec2
    rec2.entries[0].descriptor = rec2.entries[0].descriptor.copy()
    rec2.entries[0].descriptor[0] += np.float32(1e-3)
    assert rec1 != rec2
    assert rec1 != "not a record"
    assert PatchEntry(0, FULL, np.ones(2, np.float32)) != 3


# ---------------------------------------------------------------------------
# synthetic corpus


def test_synth_dataset_deterministic():
    kw = dict(n_images=12, image_size=64, target_size_range=(16, 18), seed=42,
              n_positives=3, keep_out_center_frac=0.5, align=16, align_jitter=1)
    a = synth_dataset(**kw)
    b = synth_dataset(**kw)
    assert a.instance_id == b.instance_id == "tex-42"
    assert a.positives == b.positives
    assert np.array_equal(a.texture, b.texture)
    for ia, ib in zip(a.images, b.images):
        assert ia.image_id == ib.image_id
        assert np.array_equal(ia.pixels, ib.pixels)


def test_synth_dataset_shapes_and_positives():
    ds = synth_dataset(10, 64, (16, 20), seed=5, n_positives=4)
    assert len(ds.images) == 10
    assert len(ds.positives) == 4
    assert ds.texture.shape == (64, 64)
    for im in ds.images:
        assert im.pixels.shape == (64, 64)
        assert im.pixels.min() >= 0.0 and im.pixels.max() <= 1.0
        if im.image_id in ds.positives:
            box = ds.positives[im.image_id]
            assert im.planted_box == box and im.instance_id == ds.instance_id
            assert 16 <= box.w <= 20 and box.w == box.h
            assert 0 <= box.x and box.x + box.w <= 64
            assert 0 <= box.y and box.y + box.h <= 64
            # the planted crop is exactly the rendered tile
            crop = im.pixels[box.y : box.y + box.h, box.x : box.x + box.w]
            assert crop.min() == 0.0 or crop.max() == 1.0 or crop.std() > 0.05
        else:
            assert im.planted_box is None and im.instance_id is None


def test_synth_dataset_keep_out_and_alignment():
    for seed in range(20):
        ds = synth_dataset(6, 64, (16, 16), seed=seed, n_positives=2,
                           keep_out_center_frac=0.5, align=16, align_jitter=1)
        for box in ds.positives.values():
            cx, cy = box.x + box.w / 2, box.y + box.h / 2
            assert abs(cx - 32) > 16 or abs(cy - 32) > 16
            assert min(box.x % 16, 16 - box.x % 16) <= 1
            assert min(box.y % 16, 16 - box.y % 16) <= 1


def test_synth_dataset_full_size_target_pins_origin():
    ds = synth_dataset(3, 32, (32, 32), seed=1, n_positives=1)
    (box,) = ds.positives.values()
    assert box == PixelBox(0, 0, 32, 32)


def test_synth_dataset_infeasible_keep_out():
    with pytest.raises(ValueError, match="infeasible"):
        synth_dataset(4, 32, (31, 31), seed=0, n_positives=1,
                      keep_out_center_frac=1.0)


@pytest.mark.parametrize(
    "kw",
    [
        dict(n_images=0, image_size=32, target_size_range=(4, 4), seed=0),
        dict(n_images=4, image_size=32, target_size_range=(4, 4), seed=0, n_positives=5),
        dict(n_images=4, image_size=32, target_size_range=(5, 4), seed=0),
        dict(n_images=4, image_size=32, target_size_range=(4, 40), seed=0),
        dict(n_images=4, image_size=32, target_size_range=(4, 4), seed=0, texture_cells=1),
        dict(n_images=4, image_size=32, target_size_range=(4, 4), seed=0, align=0),
    ],
)
def test_synth_dataset_rejects_bad_args(kw):
    with pytest.raises(ValueError):
        synth_dataset(**kw)


def test_resize_bilinear_identity_and_range():
    tile = np.random.default_rng(2).random((4, 4))
    assert np.array_equal(_resize_bilinear(tile, 4, 4), tile)
    up = _resize_bilinear(tile, 17, 17)
    assert up.shape == (17, 17)
    assert up.min() >= tile.min() - 1e-12 and up.max() <= tile.max() + 1e-12


def test_planted_target_outscores_background():
    # embedding the exact planted region must match the texture query far
    # better than any background image does at the global level
    ds = synth_dataset(8, 64, (16, 16), seed=9, n_positives=1, align=16)
    q = normalize(toy_embed(ds.texture, FULL, 64, seed=3))
    (pos_id,) = ds.positives
    box = ds.positives[pos_id]
    region = NormRect(box.x / 64, box.y / 64, (box.x + box.w) / 64, (box.y + box.h) / 64)
    on_target = None
    bg_scores = []
    for im in ds.images:
        if im.image_id == pos_id:
            on_target = float(q @ toy_embed(im.pixels, region, 64, seed=3))
        else:
            bg_scores.append(float(q @ toy_embed(im.pixels, FULL, 64, seed=3)))
    assert on_target > 0.95
    assert on_target > max(bg_scores) + 0.01


# ---------------------------------------------------------------------------
# best_patch_for_box


def test_best_patch_for_box_exact_cell():
    patches = grid_patches(PatchLevel.L2)
    # row 1, col 2 of the 3x3 grid: ids run 0 global, 1-4, then 5-13
    box = PixelBox(64, 32, 32, 32)
    assert best_patch_for_box(patches, box, 96, 96) == 5 + 1 * 3 + 2


def test_best_patch_for_box_prefers_higher_iou():
    patches = grid_patches(PatchLevel.L3)
    box = PixelBox(0, 0, 16, 16)  # top-left cell of the 4x4 grid in 64px
    pid = best_patch_for_box(patches, box, 64, 64)
    region = dict(patches.items())[pid]
    assert iou(to_pixel(region, 64, 64), box) == 1.0
    assert pid == 14  # first 4x4 id: 1 + 4 + 9


def test_best_patch_for_box_tie_takes_first():
    patches = grid_patches(PatchLevel.L0)
    assert best_patch_for_box(patches, PixelBox(0, 0, 10, 10), 20, 20) == 0
