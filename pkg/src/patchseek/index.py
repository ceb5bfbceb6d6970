"""Exact patch-wise retrieval over flat in-memory descriptors.

An image's score for a query is the maximum dot product over its patch
descriptors; images are ranked by score descending with ties broken by
image_id ascending, and the best patch attribution breaks score ties by
patch_id ascending.  All of this is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .embed import ImageRecord
from .geometry import NormRect

_NORM_TOL = 1e-3


@dataclass(frozen=True)
class RankedHit:
    image_id: str
    score: float
    best_patch_id: int
    best_region: NormRect
    rank: int


@dataclass
class RankedList:
    query_id: str
    hits: list[RankedHit]

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self):
        return iter(self.hits)


@dataclass(eq=False)
class RowTable:
    """Validated per-patch rows shared by the flat and quantized indexes.

    Rows are grouped by image in record order and sorted by patch_id inside
    each image, so the first row attaining a maximal score is also the one
    with the lowest patch_id.
    """

    image_ids: list[str]
    image_dims: list[tuple[int, int]]
    starts: np.ndarray
    patch_ids: np.ndarray
    regions: list[NormRect]
    matrix: np.ndarray

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def n_rows(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


def collect_rows(records: Sequence[ImageRecord]) -> RowTable:
    """Validate records and flatten them into contiguous row arrays."""
    if not records:
        raise ValueError("cannot build an index from zero records")
    seen: set[str] = set()
    dim: int | None = None
    image_ids: list[str] = []
    image_dims: list[tuple[int, int]] = []
    starts = [0]
    patch_ids: list[int] = []
    regions: list[NormRect] = []
    rows: list[np.ndarray] = []
    for rec in records:
        if rec.image_id in seen:
            raise ValueError(f"duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
        if not rec.entries:
            raise ValueError(f"record {rec.image_id!r} has no patch entries")
        entries = sorted(rec.entries, key=lambda e: e.patch_id)
        pids = [e.patch_id for e in entries]
        if len(set(pids)) != len(pids):
            raise ValueError(f"record {rec.image_id!r} has duplicate patch ids")
        for e in entries:
            desc = np.asarray(e.descriptor, dtype=np.float32)
            if desc.ndim != 1:
                raise ValueError("descriptors must be 1-D")
            if dim is None:
                dim = desc.shape[0]
            elif desc.shape[0] != dim:
                raise ValueError(
                    f"mixed descriptor dimensions: {desc.shape[0]} vs {dim}"
                )
            norm = float(np.linalg.norm(desc.astype(np.float64)))
            if abs(norm - 1.0) > _NORM_TOL:
                raise ValueError(
                    f"descriptor for {rec.image_id!r} patch {e.patch_id} is not unit"
                    f" norm (|v| = {norm:.6f})"
                )
            patch_ids.append(e.patch_id)
            regions.append(e.region)
            rows.append(desc)
        image_ids.append(rec.image_id)
        image_dims.append((rec.width, rec.height))
        starts.append(len(rows))
    return RowTable(
        image_ids=image_ids,
        image_dims=image_dims,
        starts=np.asarray(starts, dtype=np.int64),
        patch_ids=np.asarray(patch_ids, dtype=np.int64),
        regions=regions,
        matrix=np.ascontiguousarray(np.stack(rows)),
    )


class FlatIndex:
    """Uncompressed index holding every patch descriptor as a float32 row."""

    def __init__(self, rows: RowTable):
        self.rows = rows
        self._ordinal = {image_id: i for i, image_id in enumerate(rows.image_ids)}

    @property
    def dim(self) -> int:
        return self.rows.dim

    @property
    def n_images(self) -> int:
        return self.rows.n_images

    @property
    def n_rows(self) -> int:
        return self.rows.n_rows


def build_flat(records: Sequence[ImageRecord]) -> FlatIndex:
    return FlatIndex(collect_rows(records))


def _check_query(query: np.ndarray, dim: int) -> np.ndarray:
    q = np.ascontiguousarray(query, dtype=np.float32)
    if q.ndim != 1 or q.shape[0] != dim:
        raise ValueError(f"query must be a 1-D vector of dim {dim}")
    return q


def _row_scores(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    # row-at-a-time accumulation so scores are bit-identical to a plain
    # per-patch dot-product loop, which keeps oracle comparisons exact
    scores = np.empty(matrix.shape[0], dtype=np.float32)
    for i in range(matrix.shape[0]):
        scores[i] = np.dot(matrix[i], q)
    return scores


def rank_images(
    image_ids: Sequence[str],
    best_scores: Sequence[float],
    k: int,
) -> list[tuple[int, float]]:
    """Order image ordinals by score descending, image_id ascending on ties."""
    order = sorted(
        range(len(image_ids)), key=lambda o: (-best_scores[o], image_ids[o])
    )
    return [(o, float(best_scores[o])) for o in order[:k]]


def search(index: FlatIndex, query: np.ndarray, k: int, query_id: str = "") -> RankedList:
    """Rank every image by its best-matching patch; return the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = index.rows
    q = _check_query(query, rows.dim)
    scores = _row_scores(rows.matrix, q)
    best_off = np.empty(rows.n_images, dtype=np.int64)
    best_score = np.empty(rows.n_images, dtype=np.float32)
    for o in range(rows.n_images):
        s, e = rows.starts[o], rows.starts[o + 1]
        local = int(np.argmax(scores[s:e]))
        best_off[o] = s + local
        best_score[o] = scores[s + local]
    hits = []
    for rank, (o, score) in enumerate(rank_images(rows.image_ids, best_score, k), start=1):
        off = int(best_off[o])
        hits.append(
            RankedHit(
                image_id=rows.image_ids[o],
                score=score,
                best_patch_id=int(rows.patch_ids[off]),
                best_region=rows.regions[off],
                rank=rank,
            )
        )
    return RankedList(query_id=query_id, hits=hits)


def best_patch(
    index: FlatIndex, image_id: str, query: np.ndarray
) -> tuple[int, NormRect, float]:
    """Best-scoring patch of one image for a query: (patch_id, region, score)."""
    rows = index.rows
    q = _check_query(query, rows.dim)
    try:
        o = index._ordinal[image_id]
    except KeyError:
        raise KeyError(f"unknown image_id {image_id!r}") from None
    s, e = rows.starts[o], rows.starts[o + 1]
    scores = _row_scores(rows.matrix[s:e], q)
    local = int(np.argmax(scores))
    off = int(s) + local
    return int(rows.patch_ids[off]), rows.regions[off], float(scores[local])
