"""Patch geometry: normalized regions, multi-scale grids, and pixel-space boxes.

All regions are axis-aligned. Normalized coordinates live in the unit square
with the origin at the top-left corner; pixel boxes use (x, y, w, h) with
integer coordinates and half-open extents [x, x + w) x [y, y + h).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence


@dataclass(frozen=True)
class NormRect:
    """Axis-aligned rectangle in normalized image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(f"degenerate or out-of-range rectangle: {self!r}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class PixelBox:
    """Pixel-space box (x, y, w, h); width and height are at least 1."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w < 1 or self.h < 1:
            raise ValueError(f"pixel box needs w, h >= 1: {self!r}")

    @property
    def area(self) -> int:
        return self.w * self.h


class PatchLevel(enum.Enum):
    """Cumulative multi-scale grid levels.

    Level Ln stacks every square grid from 1x1 up to (n+1)x(n+1), so the
    patch counts are 1, 5, 14 and 30 for L0 through L3.
    """

    L0 = 0
    L1 = 1
    L2 = 2
    L3 = 3

    @property
    def grid_sizes(self) -> tuple[int, ...]:
        return tuple(range(1, self.value + 2))

    @property
    def patch_count(self) -> int:
        return sum(g * g for g in self.grid_sizes)

    @classmethod
    def from_string(cls, name: str) -> "PatchLevel":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown patch level {name!r}; expected one of l0..l3") from None


@dataclass(frozen=True)
class PatchSet:
    """Ordered patch regions for one image; patch ids are the positions 0..n-1."""

    strategy: str
    regions: tuple[NormRect, ...]

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self) -> Iterator[NormRect]:
        return iter(self.regions)

    def items(self) -> Iterator[tuple[int, NormRect]]:
        return enumerate(self.regions)


def grid_patches(level: PatchLevel) -> PatchSet:
    """Non-overlapping grid patches for every grid size of `level`.

    Patches are emitted with grid size ascending and cells in row-major
    order, so patch 0 is always the global 1x1 region and the ids of a
    lower level are a prefix of any higher level.
    """
    regions = []
    for g in level.grid_sizes:
        for row in range(g):
            for col in range(g):
                regions.append(NormRect(col / g, row / g, (col + 1) / g, (row + 1) / g))
    return PatchSet(strategy="grid", regions=tuple(regions))


def sliding_windows(level: PatchLevel, stride_frac: float) -> PatchSet:
    """Overlapping square windows at every grid scale of `level`.

    For each grid size g > 1 the window side is 1/g and the step is
    stride_frac/g, giving floor((g-1)/stride_frac) + 1 positions per axis.
    The final window on each axis is clamped flush to the image edge, and
    the global 1x1 patch is always emitted first.  With stride_frac = 1.0
    the result coincides exactly with `grid_patches`.
    """
    if not 0.0 < stride_frac <= 1.0:
        raise ValueError(f"stride_frac must lie in (0, 1], got {stride_frac}")
    regions = [NormRect(0.0, 0.0, 1.0, 1.0)]
    for g in level.grid_sizes:
        if g == 1:
            continue
        # epsilon guards floor() against strides like 0.1 where (g-1)/stride
        # lands one ulp under an integer
        n = math.floor((g - 1) / stride_frac + 1e-9) + 1
        offsets = [i * stride_frac for i in range(n - 1)] + [float(g - 1)]
        for oy in offsets:
            for ox in offsets:
                regions.append(NormRect(ox / g, oy / g, (ox + 1) / g, (oy + 1) / g))
    return PatchSet(strategy="sliding", regions=tuple(regions))


def external_regions(
    boxes: Sequence[PixelBox],
    image_w: int,
    image_h: int,
    max_count: int = 20,
) -> PatchSet:
    """Patch set from externally supplied pixel boxes (e.g. region proposals).

    Boxes are normalized against the image size, clamped to the unit square,
    dropped if clamping leaves zero area, and truncated to `max_count` in
    input order.  The global 1x1 patch is always prepended as patch 0.
    """
    if image_w < 1 or image_h < 1:
        raise ValueError("image dimensions must be >= 1")
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    regions = [NormRect(0.0, 0.0, 1.0, 1.0)]
    kept = []
    for box in boxes:
        x0 = max(box.x / image_w, 0.0)
        y0 = max(box.y / image_h, 0.0)
        x1 = min((box.x + box.w) / image_w, 1.0)
        y1 = min((box.y + box.h) / image_h, 1.0)
        if x1 <= x0 or y1 <= y0:
            continue
        kept.append(NormRect(x0, y0, x1, y1))
    regions.extend(kept[:max_count])
    return PatchSet(strategy="external", regions=tuple(regions))


def _round_half_up(v: float) -> int:
    # round-half-away-from-zero; inputs here are always non-negative
    return math.floor(v + 0.5)


def to_pixel(rect: NormRect, image_w: int, image_h: int) -> PixelBox:
    """Convert a normalized rectangle to an integer pixel box.

    Edges are scaled and rounded half-away-from-zero, then the box is
    clamped inside the image with width and height forced to at least one
    pixel.
    """
    if image_w < 1 or image_h < 1:
        raise ValueError("image dimensions must be >= 1")
    x = min(max(_round_half_up(rect.x0 * image_w), 0), image_w - 1)
    y = min(max(_round_half_up(rect.y0 * image_h), 0), image_h - 1)
    x1 = min(max(_round_half_up(rect.x1 * image_w), x + 1), image_w)
    y1 = min(max(_round_half_up(rect.y1 * image_h), y + 1), image_h)
    return PixelBox(x=x, y=y, w=x1 - x, h=y1 - y)


def iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union of two pixel boxes; 0.0 when disjoint."""
    ix = max(a.x, b.x)
    iy = max(a.y, b.y)
    ix1 = min(a.x + a.w, b.x + b.w)
    iy1 = min(a.y + a.h, b.y + b.h)
    inter = max(0, ix1 - ix) * max(0, iy1 - iy)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def center_distance(box: PixelBox, image_w: int, image_h: int) -> float:
    """Distance from box center to image center, normalized by the diagonal."""
    cx = box.x + box.w / 2.0
    cy = box.y + box.h / 2.0
    dx = cx - image_w / 2.0
    dy = cy - image_h / 2.0
    return math.hypot(dx, dy) / math.hypot(image_w, image_h)


def bbox_ratio(box: PixelBox, image_w: int, image_h: int) -> float:
    """Box area as a fraction of the image area."""
    return box.area / float(image_w * image_h)
