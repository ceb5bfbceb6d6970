"""From-scratch inverted-file product quantization (IVF-PQ).

Vectors are assigned to a coarse centroid by maximum inner product (for
unit vectors this matches minimum L2) and their raw values are product-
quantized per subvector; there is no residual encoding, so an asymmetric
distance table lookup reconstructs plain inner products.  Codebooks come
from a seeded Lloyd k-means with k-means++ initialization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embed import ImageRecord
from .geometry import NormRect, PatchLevel, PixelBox, iou, to_pixel
from .index import FlatIndex, RankedHit, RankedList, RowTable, collect_rows, rank_images

#: patch_id reserved for descriptors embedded directly from a ground-truth
#: crop rather than from a generated patch region
GT_PATCH_ID = 0xFFFF

_POOL_LEVELS = {"l0": PatchLevel.L0, "l1": PatchLevel.L1, "l2": PatchLevel.L2, "l3": PatchLevel.L3}


@dataclass(frozen=True)
class PQParams:
    """Product-quantizer shape: m subvectors, 2**nbits centroids each,
    nlist coarse cells, nprobe cells visited per query."""

    m: int
    nlist: int
    nbits: int = 8
    nprobe: int = 8

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.nbits != 8:
            raise ValueError("only nbits = 8 (256 centroids per subquantizer) is supported")
        if self.nlist < 1:
            raise ValueError("nlist must be >= 1")
        if self.nprobe < 1:
            raise ValueError("nprobe must be >= 1")

    @property
    def ksub(self) -> int:
        return 1 << self.nbits


@dataclass(eq=False)
class KMeansResult:
    centroids: np.ndarray
    inertia: float
    history: list[float]
    n_iter: int


def _sq_dist_to(points: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    diff = points - centroid
    return np.einsum("ij,ij->i", diff, diff)


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # expansion form for speed; exact distances are recomputed for the
    # objective so duplicate points still report an objective of exactly 0
    p2 = np.einsum("ij,ij->i", points, points)
    c2 = np.einsum("ij,ij->i", centroids, centroids)
    d2 = p2[:, None] - 2.0 * (points @ centroids.T) + c2[None, :]
    return np.argmin(d2, axis=1)


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 25,
    tol: float = 1e-4,
) -> KMeansResult:
    """Seeded k-means++ initialization followed by Lloyd iterations.

    Empty clusters are re-seeded with the point currently farthest from its
    centroid.  When k exceeds the number of distinct points, duplicate
    centroids are allowed and a warning is issued.  The objective (sum of
    squared distances) never increases from one iteration to the next.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("points must be a non-empty 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = points.shape[0]
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(n))]
    d2 = _sq_dist_to(points, centroids[0])
    saturated = False
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            saturated = True
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[c] = points[idx]
        np.minimum(d2, _sq_dist_to(points, centroids[c]), out=d2)
    if saturated:
        warnings.warn(
            "k exceeds the number of distinct points; duplicate centroids kept",
            RuntimeWarning,
            stacklevel=2,
        )

    history: list[float] = []
    prev = np.inf
    assign = np.zeros(n, dtype=np.int64)
    for it in range(max_iters):
        assign = _assign(points, centroids)
        resid = points - centroids[assign]
        obj = float(np.einsum("ij,ij->", resid, resid))
        assert obj <= prev + 1e-9 * max(1.0, prev), "k-means objective increased"
        history.append(obj)
        if obj == 0.0 or (np.isfinite(prev) and prev - obj <= tol * prev):
            break
        prev = obj
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            point_d2 = np.einsum("ij,ij->i", resid, resid).copy()
            for cid in empties:
                far = int(np.argmax(point_d2))
                centroids[cid] = points[far]
                point_d2[far] = -1.0
    return KMeansResult(
        centroids=centroids, inertia=history[-1], history=history, n_iter=len(history)
    )


@dataclass(eq=False)
class Codebook:
    """Trained quantizer state: per-subvector centroid tables plus the
    coarse centroid table, with the seed and pool tag that produced them."""

    sub_centroids: np.ndarray  # (m, ksub, dsub) float32
    coarse: np.ndarray  # (nlist_effective, d) float32
    seed: int
    pool_tag: str = ""

    @property
    def m(self) -> int:
        return int(self.sub_centroids.shape[0])

    @property
    def ksub(self) -> int:
        return int(self.sub_centroids.shape[1])

    @property
    def dsub(self) -> int:
        return int(self.sub_centroids.shape[2])

    @property
    def dim(self) -> int:
        return int(self.coarse.shape[1])

    @property
    def nlist(self) -> int:
        return int(self.coarse.shape[0])


def train(
    pool: np.ndarray, params: PQParams, seed: int, pool_tag: str = ""
) -> Codebook:
    """Train coarse and subvector codebooks on a descriptor pool.

    An nlist larger than the pool is clamped to the pool size with a
    warning.  Subquantizer seeds are derived from `seed`, so training is
    fully deterministic.
    """
    pool = np.ascontiguousarray(pool, dtype=np.float32)
    if pool.ndim != 2 or pool.shape[0] < 1:
        raise ValueError("training pool must be a non-empty 2-D array")
    n, d = pool.shape
    if d % params.m != 0:
        raise ValueError(f"descriptor dim {d} not divisible by m = {params.m}")
    nlist = params.nlist
    if nlist > n:
        warnings.warn(
            f"nlist = {nlist} exceeds pool size {n}; clamping to {n}",
            RuntimeWarning,
            stacklevel=2,
        )
        nlist = n
    seeds = np.random.SeedSequence(seed).generate_state(params.m + 1)
    coarse = kmeans(pool, nlist, int(seeds[0])).centroids.astype(np.float32)
    dsub = d // params.m
    subs = np.empty((params.m, params.ksub, dsub), dtype=np.float32)
    for j in range(params.m):
        sl = pool[:, j * dsub : (j + 1) * dsub]
        subs[j] = kmeans(sl, params.ksub, int(seeds[j + 1])).centroids.astype(np.float32)
    return Codebook(sub_centroids=subs, coarse=coarse, seed=seed, pool_tag=pool_tag)


def select_training_pool(
    records: Sequence[ImageRecord],
    strategy: str,
    gt_boxes: Mapping[str, PixelBox] | None = None,
) -> np.ndarray:
    """Collect PQ training descriptors from embedded records.

    Level strategies ("l0".."l3") take every patch up to that level's patch
    count, relying on the cumulative patch-id layout.  The "gt" strategy
    takes one descriptor per annotated image: the entry stored under the
    reserved GT_PATCH_ID if present, otherwise the patch whose region best
    overlaps the ground-truth box.
    """
    if strategy in _POOL_LEVELS:
        cutoff = _POOL_LEVELS[strategy].patch_count
        vecs = [
            np.asarray(e.descriptor, dtype=np.float32)
            for rec in records
            for e in rec.entries
            if e.patch_id < cutoff
        ]
        if not vecs:
            raise ValueError(f"no descriptors at or below level {strategy}")
        return np.stack(vecs)
    if strategy != "gt":
        raise ValueError(f"unknown training-pool strategy {strategy!r}")
    if not gt_boxes:
        raise ValueError("gt training pool requires ground-truth boxes")
    vecs = []
    for rec in records:
        box = gt_boxes.get(rec.image_id)
        if box is None:
            continue
        direct = [e for e in rec.entries if e.patch_id == GT_PATCH_ID]
        if direct:
            vecs.append(np.asarray(direct[0].descriptor, dtype=np.float32))
            continue
        best = max(
            rec.entries,
            key=lambda e: (iou(to_pixel(e.region, rec.width, rec.height), box), -e.patch_id),
        )
        vecs.append(np.asarray(best.descriptor, dtype=np.float32))
    if not vecs:
        raise ValueError("no ground-truth boxes matched any record")
    return np.stack(vecs)


@dataclass(frozen=True)
class PQCode:
    """One quantized vector: coarse cell id plus m one-byte sub-codes."""

    list_id: int
    codes: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PQCode):
            return NotImplemented
        return self.list_id == other.list_id and np.array_equal(self.codes, other.codes)


def _encode_batch(cb: Codebook, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[1] != cb.dim:
        raise ValueError(f"vectors must be 2-D with dim {cb.dim}")
    list_ids = np.argmax(vectors @ cb.coarse.T, axis=1)
    codes = np.empty((vectors.shape[0], cb.m), dtype=np.uint8)
    for j in range(cb.m):
        sub = vectors[:, j * cb.dsub : (j + 1) * cb.dsub].astype(np.float64)
        cents = cb.sub_centroids[j].astype(np.float64)
        d2 = (
            np.einsum("ij,ij->i", sub, sub)[:, None]
            - 2.0 * (sub @ cents.T)
            + np.einsum("ij,ij->i", cents, cents)[None, :]
        )
        codes[:, j] = np.argmin(d2, axis=1)
    return list_ids.astype(np.int64), codes


def encode(cb: Codebook, v: np.ndarray) -> PQCode:
    """Quantize one vector to its coarse cell and sub-codes."""
    list_ids, codes = _encode_batch(cb, np.asarray(v, dtype=np.float32)[None, :])
    return PQCode(list_id=int(list_ids[0]), codes=codes[0])


def _decode_batch(cb: Codebook, codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.empty((codes.shape[0], cb.dim), dtype=np.float32)
    for j in range(cb.m):
        out[:, j * cb.dsub : (j + 1) * cb.dsub] = cb.sub_centroids[j][codes[:, j]]
    return out


def decode(cb: Codebook, code: PQCode) -> np.ndarray:
    """Reconstruct the centroid concatenation a code refers to."""
    return _decode_batch(cb, np.asarray(code.codes)[None, :])[0]


def adc_tables(cb: Codebook, query: np.ndarray) -> np.ndarray:
    """Asymmetric-distance tables: table[j][c] = <query_j, centroid_{j,c}>.

    The approximate score of a code is the sum of its m table entries,
    which equals the inner product between the query and the decoded
    vector.
    """
    q = np.ascontiguousarray(query, dtype=np.float32)
    if q.ndim != 1 or q.shape[0] != cb.dim:
        raise ValueError(f"query must be a 1-D vector of dim {cb.dim}")
    tables = np.empty((cb.m, cb.ksub), dtype=np.float32)
    for j in range(cb.m):
        tables[j] = cb.sub_centroids[j] @ q[j * cb.dsub : (j + 1) * cb.dsub]
    return tables


@dataclass(eq=False)
class InvertedList:
    image_ord: np.ndarray
    patch_ids: np.ndarray
    region_index: np.ndarray  # indices into the shared region list
    codes: np.ndarray  # (n, m) uint8


class IVFPQIndex:
    """Compressed index: per-cell lists of (image, patch, code) entries."""

    def __init__(
        self,
        params: PQParams,
        codebook: Codebook,
        image_ids: list[str],
        image_dims: list[tuple[int, int]],
        regions: list[NormRect],
        lists: list[InvertedList],
    ):
        self.params = params
        self.codebook = codebook
        self.image_ids = image_ids
        self.image_dims = image_dims
        self.regions = regions
        self.lists = lists

    @property
    def dim(self) -> int:
        return self.codebook.dim

    @property
    def nlist(self) -> int:
        return self.codebook.nlist

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def total_entries(self) -> int:
        return sum(int(lst.codes.shape[0]) for lst in self.lists)


def build_ivfpq(
    records: Sequence[ImageRecord], codebook: Codebook, params: PQParams
) -> IVFPQIndex:
    """Encode every patch descriptor and scatter it into its coarse cell."""
    rows = collect_rows(records)
    if rows.dim != codebook.dim:
        raise ValueError(
            f"record dim {rows.dim} does not match codebook dim {codebook.dim}"
        )
    list_ids, codes = _encode_batch(codebook, rows.matrix)
    image_ord = np.repeat(
        np.arange(rows.n_images, dtype=np.int64), np.diff(rows.starts)
    )
    lists = []
    for cell in range(codebook.nlist):
        idx = np.flatnonzero(list_ids == cell)
        lists.append(
            InvertedList(
                image_ord=image_ord[idx],
                patch_ids=rows.patch_ids[idx],
                region_index=idx.copy(),
                codes=np.ascontiguousarray(codes[idx]),
            )
        )
    return IVFPQIndex(
        params=params,
        codebook=codebook,
        image_ids=rows.image_ids,
        image_dims=rows.image_dims,
        regions=rows.regions,
        lists=lists,
    )


def search_ivfpq(
    index: IVFPQIndex,
    query: np.ndarray,
    k: int,
    nprobe: int | None = None,
    query_id: str = "",
) -> RankedList:
    """Approximate ranking over the nprobe most promising coarse cells.

    Images whose entries all live in unprobed cells are absent from the
    result.  Tie-breaking matches flat search: score descending, image_id
    ascending, and lowest patch_id for the attribution.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    nprobe = index.params.nprobe if nprobe is None else nprobe
    if nprobe < 1:
        raise ValueError("nprobe must be >= 1")
    nprobe = min(nprobe, index.nlist)
    q = np.ascontiguousarray(query, dtype=np.float32)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise ValueError(f"query must be a 1-D vector of dim {index.dim}")

    cell_scores = index.codebook.coarse @ q
    probed = np.argsort(-cell_scores, kind="stable")[:nprobe]
    tables = adc_tables(index.codebook, q)

    imgs, pids, ridx, scores = [], [], [], []
    col = np.arange(index.codebook.m)
    for cell in probed:
        lst = index.lists[int(cell)]
        if lst.codes.shape[0] == 0:
            continue
        imgs.append(lst.image_ord)
        pids.append(lst.patch_ids)
        ridx.append(lst.region_index)
        scores.append(tables[col[None, :], lst.codes.astype(np.int64)].sum(axis=1))
    if not imgs:
        return RankedList(query_id=query_id, hits=[])
    imgs = np.concatenate(imgs)
    pids = np.concatenate(pids)
    ridx = np.concatenate(ridx)
    scores = np.concatenate(scores)

    order = np.lexsort((pids, imgs))
    imgs, pids, ridx, scores = imgs[order], pids[order], ridx[order], scores[order]
    uniq, starts = np.unique(imgs, return_index=True)
    bounds = np.append(starts, imgs.shape[0])
    cand_ids, cand_scores, cand_best = [], [], []
    for i, ordn in enumerate(uniq):
        s, e = bounds[i], bounds[i + 1]
        local = s + int(np.argmax(scores[s:e]))
        cand_ids.append(index.image_ids[int(ordn)])
        cand_scores.append(scores[local])
        cand_best.append(local)
    hits = []
    for rank, (ci, score) in enumerate(rank_images(cand_ids, cand_scores, k), start=1):
        local = cand_best[ci]
        hits.append(
            RankedHit(
                image_id=cand_ids[ci],
                score=score,
                best_patch_id=int(pids[local]),
                best_region=index.regions[int(ridx[local])],
                rank=rank,
            )
        )
    return RankedList(query_id=query_id, hits=hits)


@dataclass(frozen=True)
class CompressionStats:
    """Byte accounting for an index; ratio = raw_bytes / compressed_bytes."""

    vector_count: int
    dim: int
    raw_bytes: int
    code_bytes: int
    coarse_id_bytes: int
    codebook_bytes: int
    coarse_table_bytes: int
    compressed_bytes: int
    ratio: float


def compression_accounting(count: int, dim: int, m: int, nlist: int) -> CompressionStats:
    """Compression arithmetic for `count` float32 vectors under PQ.

    Per vector: m one-byte codes plus a two-byte coarse cell id.  Shared
    overhead: the subquantizer codebooks (256 float32 centroids per
    subvector) and the coarse centroid table.
    """
    raw = count * dim * 4
    code = count * m
    cid = count * 2
    codebook = 256 * dim * 4
    coarse_table = nlist * dim * 4
    compressed = code + cid + codebook + coarse_table
    return CompressionStats(
        vector_count=count,
        dim=dim,
        raw_bytes=raw,
        code_bytes=code,
        coarse_id_bytes=cid,
        codebook_bytes=codebook,
        coarse_table_bytes=coarse_table,
        compressed_bytes=compressed,
        ratio=raw / compressed,
    )


def compression_stats(index: "IVFPQIndex | FlatIndex") -> CompressionStats:
    """Stats for a built index; a flat index reports a ratio of exactly 1."""
    if isinstance(index, IVFPQIndex):
        return compression_accounting(
            index.total_entries, index.dim, index.codebook.m, index.nlist
        )
    if not isinstance(index, FlatIndex):
        raise TypeError("expected a FlatIndex or IVFPQIndex")
    rows = index.rows
    raw = rows.n_rows * rows.dim * 4
    return CompressionStats(
        vector_count=rows.n_rows,
        dim=rows.dim,
        raw_bytes=raw,
        code_bytes=raw,
        coarse_id_bytes=0,
        codebook_bytes=0,
        coarse_table_bytes=0,
        compressed_bytes=raw,
        ratio=1.0,
    )
