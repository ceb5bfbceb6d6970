"""Deterministic toy embedder and synthetic planted-target corpora.

The embedder stands in for a heavyweight vision backbone at desk scale: a
region crop is average-pooled to a fixed 16x16 patch, flattened, pushed
through a seeded random projection, and L2-normalized.  It is bit-for-bit
deterministic, which lets retrieval tests assert exact equalities instead
of tolerances.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .geometry import NormRect, PatchLevel, PatchSet, PixelBox, iou, to_pixel

POOL_SIDE = 16
_POOL_DIM = POOL_SIDE * POOL_SIDE


def normalize(raw: np.ndarray) -> np.ndarray:
    """L2-normalize a vector to float32; rejects zero and non-finite input."""
    v = np.asarray(raw, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot normalize a non-finite vector")
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        # squared norm under- or overflowed; prescale by the max magnitude
        m = float(np.max(np.abs(v)))
        if m == 0.0:
            raise ValueError("cannot normalize an all-zero vector")
        v = v / m
        norm = float(np.linalg.norm(v))
    return (v / norm).astype(np.float32)


@functools.lru_cache(maxsize=16)
def _projection(d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((_POOL_DIM, d))


def _pool(crop: np.ndarray) -> np.ndarray:
    """Adaptive average pooling to POOL_SIDE x POOL_SIDE.

    Output cell (i, j) averages source rows [floor(i*h/16), ceil((i+1)*h/16))
    and the analogous columns, so every cell is non-empty for any crop of at
    least one pixel.  Sums come from a crop-local integral image, keeping the
    result identical no matter how the crop was obtained.
    """
    h, w = crop.shape
    s = np.zeros((h + 1, w + 1), dtype=np.float64)
    s[1:, 1:] = np.cumsum(np.cumsum(crop, axis=0, dtype=np.float64), axis=1)
    rs = np.array([(i * h) // POOL_SIDE for i in range(POOL_SIDE)])
    re = np.array([-((-(i + 1) * h) // POOL_SIDE) for i in range(POOL_SIDE)])
    cs = np.array([(j * w) // POOL_SIDE for j in range(POOL_SIDE)])
    ce = np.array([-((-(j + 1) * w) // POOL_SIDE) for j in range(POOL_SIDE)])
    sums = s[np.ix_(re, ce)] - s[np.ix_(rs, ce)] - s[np.ix_(re, cs)] + s[np.ix_(rs, cs)]
    counts = (re - rs)[:, None] * (ce - cs)[None, :]
    return sums / counts


def toy_embed(pixels: np.ndarray, region: NormRect, d: int, seed: int) -> np.ndarray:
    """Embed one region of a grayscale image into a unit vector of dim `d`.

    Same pixels, region, dimension and seed always give the same bits.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("pixels must be a 2-D grayscale array")
    h, w = pixels.shape
    box = to_pixel(region, w, h)
    crop = pixels[box.y : box.y + box.h, box.x : box.x + box.w]
    flat = _pool(crop).ravel()
    return normalize(flat @ _projection(d, seed))


def _f32_rect(r: NormRect) -> NormRect:
    # regions persist as float32; quantizing at ingestion keeps in-memory
    # values identical to what a file round trip produces
    return NormRect(
        float(np.float32(r.x0)),
        float(np.float32(r.y0)),
        float(np.float32(r.x1)),
        float(np.float32(r.y1)),
    )


@dataclass(eq=False)
class PatchEntry:
    """One embedded patch: id, region, unit descriptor."""

    patch_id: int
    region: NormRect
    descriptor: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatchEntry):
            return NotImplemented
        return (
            self.patch_id == other.patch_id
            and self.region == other.region
            and np.array_equal(self.descriptor, other.descriptor)
        )


@dataclass(eq=False)
class ImageRecord:
    """All embedded patches of one database image."""

    image_id: str
    width: int
    height: int
    entries: list[PatchEntry]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.width == other.width
            and self.height == other.height
            and self.entries == other.entries
        )


def embed_image(
    image_id: str, pixels: np.ndarray, patches: PatchSet, d: int, seed: int
) -> ImageRecord:
    """Embed every patch of `patches` over `pixels` into one record."""
    h, w = np.asarray(pixels).shape
    entries = [
        PatchEntry(pid, _f32_rect(region), toy_embed(pixels, region, d, seed))
        for pid, region in patches.items()
    ]
    return ImageRecord(image_id=image_id, width=w, height=h, entries=entries)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(eq=False)
class SynthImage:
    image_id: str
    pixels: np.ndarray
    planted_box: PixelBox | None
    instance_id: str | None


@dataclass(eq=False)
class SynthDataset:
    images: list[SynthImage]
    texture: np.ndarray
    instance_id: str
    positives: dict[str, PixelBox] = field(default_factory=dict)


def _resize_nearest(tile: np.ndarray, h: int, w: int) -> np.ndarray:
    th, tw = tile.shape
    rows = (np.arange(h) * th) // h
    cols = (np.arange(w) * tw) // w
    return tile[np.ix_(rows, cols)]


def _resize_bilinear(tile: np.ndarray, h: int, w: int) -> np.ndarray:
    th, tw = tile.shape
    ys = (np.arange(h) + 0.5) * th / h - 0.5
    xs = (np.arange(w) + 0.5) * tw / w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, th - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    x1 = np.minimum(x0 + 1, tw - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    return (
        tile[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + tile[np.ix_(y0, x1)] * (1 - fy) * fx
        + tile[np.ix_(y1, x0)] * fy * (1 - fx)
        + tile[np.ix_(y1, x1)] * fy * fx
    )


_PLACEMENT_ATTEMPTS = 1000


def synth_dataset(
    n_images: int,
    image_size: int,
    target_size_range: tuple[int, int],
    seed: int,
    n_positives: int = 1,
    id_prefix: str = "img",
    keep_out_center_frac: float = 0.0,
    clutter: float = 0.0,
    texture_cells: int = 4,
    texture_smooth: bool = True,
    align: int = 1,
    align_jitter: int = 0,
) -> SynthDataset:
    """Noise images, a random subset of which carries a shared planted texture.

    Backgrounds are uniform noise in [0.25, 0.75], optionally plus a smooth
    per-image structure field of amplitude `clutter`.  The planted instance
    is a contrast-stretched random `texture_cells` x `texture_cells` pattern
    upsampled bilinearly (or nearest-neighbor with `texture_smooth=False`)
    to a size drawn from `target_size_range`.  Placement is uniform; with
    `align` > 1 positions snap to multiples of `align` plus a uniform jitter
    of up to `align_jitter` pixels, and with `keep_out_center_frac` > 0 the
    box center is rejected from the central square covering that fraction
    of each axis.  Everything is a pure function of `seed`.
    """
    lo, hi = target_size_range
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if not 0 <= n_positives <= n_images:
        raise ValueError("n_positives must lie in [0, n_images]")
    if not 1 <= lo <= hi:
        raise ValueError("target_size_range must satisfy 1 <= lo <= hi")
    if hi > image_size:
        raise ValueError(
            f"infeasible placement: target size {hi} exceeds image size {image_size}"
        )
    if texture_cells < 2:
        raise ValueError("texture_cells must be >= 2")
    if align < 1 or align_jitter < 0:
        raise ValueError("align must be >= 1 and align_jitter >= 0")

    rng = np.random.default_rng(seed)
    base = rng.random((texture_cells, texture_cells))
    base = (base - base.min()) / (base.max() - base.min())
    resize = _resize_bilinear if texture_smooth else _resize_nearest
    positive_ids = set(rng.choice(n_images, size=n_positives, replace=False).tolist())
    instance_id = f"tex-{seed}"

    images: list[SynthImage] = []
    positives: dict[str, PixelBox] = {}
    for i in range(n_images):
        image_id = f"{id_prefix}{i:04d}"
        pixels = rng.random((image_size, image_size)) * 0.5 + 0.25
        if clutter > 0.0:
            fld = _resize_nearest(rng.random((4, 4)) - 0.5, image_size, image_size)
            pixels = np.clip(pixels + 2.0 * clutter * fld, 0.0, 1.0)
        planted = None
        if i in positive_ids:
            size = int(rng.integers(lo, hi + 1))
            planted = _place_target(
                rng, image_size, size, keep_out_center_frac, align, align_jitter
            )
            tile = resize(base, size, size)
            pixels[planted.y : planted.y + size, planted.x : planted.x + size] = tile
            positives[image_id] = planted
        images.append(
            SynthImage(
                image_id=image_id,
                pixels=pixels,
                planted_box=planted,
                instance_id=instance_id if planted else None,
            )
        )

    texture = resize(base, image_size, image_size)
    return SynthDataset(
        images=images, texture=texture, instance_id=instance_id, positives=positives
    )


def _place_target(
    rng: np.random.Generator,
    image_size: int,
    size: int,
    keep_out_center_frac: float,
    align: int = 1,
    align_jitter: int = 0,
) -> PixelBox:
    span = image_size - size
    if span == 0:
        return PixelBox(0, 0, size, size)

    def draw() -> tuple[int, int]:
        if align > 1:
            slots = image_size // align
            x = int(rng.integers(0, slots)) * align
            y = int(rng.integers(0, slots)) * align
            if align_jitter:
                x += int(rng.integers(-align_jitter, align_jitter + 1))
                y += int(rng.integers(-align_jitter, align_jitter + 1))
            return int(np.clip(x, 0, span)), int(np.clip(y, 0, span))
        return int(rng.integers(0, span + 1)), int(rng.integers(0, span + 1))

    if keep_out_center_frac <= 0.0:
        x, y = draw()
        return PixelBox(x, y, size, size)
    half = keep_out_center_frac * image_size / 2.0
    center = image_size / 2.0
    for _ in range(_PLACEMENT_ATTEMPTS):
        x, y = draw()
        cx, cy = x + size / 2.0, y + size / 2.0
        if abs(cx - center) > half or abs(cy - center) > half:
            return PixelBox(x, y, size, size)
    raise ValueError("infeasible placement: keep-out region leaves no valid position")


def best_patch_for_box(patches: PatchSet, box: PixelBox, width: int, height: int) -> int:
    """Patch id whose region best overlaps a pixel box (first wins on ties)."""
    best_id, best_iou = 0, -1.0
    for pid, region in patches.items():
        v = iou(to_pixel(region, width, height), box)
        if v > best_iou:
            best_id, best_iou = pid, v
    return best_id
