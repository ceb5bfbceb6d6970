"""Binary persistence for embeddings and indexes, plus result JSON lines.

Embedding files (magic ``PWR1``) and index files (magic ``PWIX``) are
little-endian throughout.  Readers fail with a specific error class and a
byte offset rather than ever returning partially parsed data; index files
additionally carry a CRC-32 of the payload so any truncation or bit
corruption is caught before parsing.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embed import ImageRecord, PatchEntry
from .evaluate import Positive, QueryGroundTruth
from .geometry import NormRect, PixelBox
from .index import FlatIndex, RankedHit, RankedList, RowTable
from .quantize import Codebook, InvertedList, IVFPQIndex, PQParams

EMBED_MAGIC = b"PWR1"
INDEX_MAGIC = b"PWIX"
FORMAT_VERSION = 1

_KIND_FLAT = 0
_KIND_IVFPQ = 1

_NORM_TOL = 1e-3


class FileFormatError(Exception):
    """Base class for malformed persisted files."""


class BadMagicError(FileFormatError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class DimensionMismatchError(FileFormatError):
    pass


class CorruptFileError(FileFormatError):
    pass


class _Reader:
    """Byte cursor that reports the offset of any short read."""

    def __init__(self, data: bytes, base_offset: int = 0):
        self._data = data
        self._base = base_offset
        self.pos = 0

    @property
    def offset(self) -> int:
        return self._base + self.pos

    @property
    def remaining(self) -> int:
        return len(self._data) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self._data):
            raise TruncatedFileError(
                f"file truncated at byte {self.offset}: needed {n} bytes for {what},"
                f" {self.remaining} left"
            )
        out = self._data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def u8(self, what: str) -> int:
        return self.unpack("<B", what)[0]

    def u16(self, what: str) -> int:
        return self.unpack("<H", what)[0]

    def u32(self, what: str) -> int:
        return self.unpack("<I", what)[0]

    def u64(self, what: str) -> int:
        return self.unpack("<Q", what)[0]

    def string(self, what: str) -> str:
        n = self.u16(f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"invalid UTF-8 in {what} at byte {self.offset}") from exc

    def f32_array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(count * 4, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)


def _pack_string(s: str, what: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"{what} longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def _check_u(value: int, bits: int, what: str) -> int:
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{what} = {value} does not fit in u{bits}")
    return value


def _read_rect(r: _Reader, what: str) -> NormRect:
    at = r.offset
    coords = r.unpack("<4f", what)
    if not all(np.isfinite(c) for c in coords):
        raise CorruptFileError(f"non-finite region for {what} at byte {at}")
    try:
        return NormRect(*coords)
    except ValueError as exc:
        raise CorruptFileError(f"invalid region for {what} at byte {at}: {exc}") from exc


def _pack_rect(rect: NormRect) -> bytes:
    return struct.pack("<4f", rect.x0, rect.y0, rect.x1, rect.y1)


# ---------------------------------------------------------------------------
# embedding files


def write_embeddings(
    records: Sequence[ImageRecord], path: str | Path, dim: int | None = None
) -> None:
    """Write image records to an embedding file.

    The descriptor dimension is inferred from the first entry unless given;
    every entry must match it.  Regions are stored at float32 precision.
    """
    if dim is None:
        for rec in records:
            if rec.entries:
                dim = int(np.asarray(rec.entries[0].descriptor).shape[0])
                break
        if dim is None:
            raise ValueError("cannot infer descriptor dim from empty records")
    _check_u(dim, 16, "dim")
    _check_u(len(records), 32, "record count")
    out = bytearray()
    out += struct.pack("<4sHHI", EMBED_MAGIC, FORMAT_VERSION, dim, len(records))
    for rec in records:
        out += _pack_string(rec.image_id, "image_id")
        out += struct.pack(
            "<IIH",
            _check_u(rec.width, 32, "width"),
            _check_u(rec.height, 32, "height"),
            _check_u(len(rec.entries), 16, "entry count"),
        )
        for e in rec.entries:
            desc = np.asarray(e.descriptor, dtype="<f4")
            if desc.shape != (dim,):
                raise ValueError(
                    f"descriptor dim {desc.shape} for {rec.image_id!r} patch"
                    f" {e.patch_id} does not match file dim {dim}"
                )
            out += struct.pack("<H", _check_u(e.patch_id, 16, "patch_id"))
            out += _pack_rect(e.region)
            out += desc.tobytes()
    Path(path).write_bytes(bytes(out))


def read_embeddings(path: str | Path, expected_dim: int | None = None) -> list[ImageRecord]:
    """Read an embedding file, validating structure and content invariants.

    Raises BadMagicError, UnsupportedVersionError, TruncatedFileError,
    DimensionMismatchError or CorruptFileError; never returns partial data.
    """
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != EMBED_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}; expected {EMBED_MAGIC!r}")
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported embedding file version {version}; expected {FORMAT_VERSION}"
        )
    dim = r.u16("dim")
    if dim < 1:
        raise CorruptFileError("descriptor dim must be >= 1")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(
            f"embedding file has dim {dim}; expected {expected_dim}"
        )
    count = r.u32("record count")
    records: list[ImageRecord] = []
    for _ in range(count):
        image_id = r.string("image_id")
        width, height, n_entries = r.unpack("<IIH", "record header")
        if width < 1 or height < 1:
            raise CorruptFileError(
                f"record {image_id!r} has non-positive image size at byte {r.offset}"
            )
        entries = []
        for _ in range(n_entries):
            patch_id = r.u16("patch_id")
            region = _read_rect(r, f"{image_id!r} patch {patch_id}")
            at = r.offset
            desc = r.f32_array(dim, "descriptor")
            if not np.all(np.isfinite(desc)):
                raise CorruptFileError(
                    f"non-finite descriptor for {image_id!r} patch {patch_id} at byte {at}"
                )
            norm = float(np.linalg.norm(desc.astype(np.float64)))
            if abs(norm - 1.0) > _NORM_TOL:
                raise CorruptFileError(
                    f"descriptor for {image_id!r} patch {patch_id} at byte {at} is not"
                    f" unit norm (|v| = {norm:.6f})"
                )
            entries.append(PatchEntry(patch_id=patch_id, region=region, descriptor=desc))
        records.append(
            ImageRecord(image_id=image_id, width=width, height=height, entries=entries)
        )
    if r.remaining:
        raise CorruptFileError(
            f"{r.remaining} trailing bytes after final record at byte {r.offset}"
        )
    return records


# ---------------------------------------------------------------------------
# index files


def _pack_image_table(
    dim: int, image_ids: Sequence[str], image_dims: Sequence[tuple[int, int]]
) -> bytes:
    out = bytearray()
    out += struct.pack("<HI", _check_u(dim, 16, "dim"), _check_u(len(image_ids), 32, "image count"))
    for image_id, (w, h) in zip(image_ids, image_dims):
        out += _pack_string(image_id, "image_id")
        out += struct.pack("<II", _check_u(w, 32, "width"), _check_u(h, 32, "height"))
    return bytes(out)


def _read_image_table(r: _Reader) -> tuple[int, list[str], list[tuple[int, int]]]:
    dim = r.u16("dim")
    if dim < 1:
        raise CorruptFileError("index dim must be >= 1")
    n_images = r.u32("image count")
    image_ids, image_dims = [], []
    for _ in range(n_images):
        image_id = r.string("image_id")
        w, h = r.unpack("<II", "image size")
        if w < 1 or h < 1:
            raise CorruptFileError(f"image {image_id!r} has non-positive size")
        image_ids.append(image_id)
        image_dims.append((w, h))
    return dim, image_ids, image_dims


def _flat_payload(index: FlatIndex) -> bytes:
    rows = index.rows
    out = bytearray()
    out += _pack_image_table(rows.dim, rows.image_ids, rows.image_dims)
    counts = np.diff(rows.starts)
    for c in counts:
        out += struct.pack("<I", int(c))
    out += struct.pack("<I", rows.n_rows)
    for pid, region in zip(rows.patch_ids, rows.regions):
        out += struct.pack("<H", _check_u(int(pid), 16, "patch_id"))
        out += _pack_rect(region)
    out += np.ascontiguousarray(rows.matrix, dtype="<f4").tobytes()
    return bytes(out)


def _parse_flat(r: _Reader) -> FlatIndex:
    dim, image_ids, image_dims = _read_image_table(r)
    counts = [r.u32("row count") for _ in image_ids]
    total = r.u32("total rows")
    if total != sum(counts) or total < 1:
        raise CorruptFileError("row counts are inconsistent")
    patch_ids = np.empty(total, dtype=np.int64)
    regions: list[NormRect] = []
    for i in range(total):
        patch_ids[i] = r.u16("patch_id")
        regions.append(_read_rect(r, f"row {i}"))
    matrix = r.f32_array(total * dim, "descriptor matrix").reshape(total, dim)
    starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    for o in range(len(image_ids)):
        pids = patch_ids[starts[o] : starts[o + 1]]
        if pids.size == 0:
            raise CorruptFileError(f"image {image_ids[o]!r} has no rows")
        if np.any(np.diff(pids) <= 0):
            raise CorruptFileError(f"rows of image {image_ids[o]!r} are not sorted by patch_id")
    return FlatIndex(
        RowTable(
            image_ids=image_ids,
            image_dims=image_dims,
            starts=starts,
            patch_ids=patch_ids,
            regions=regions,
            matrix=matrix,
        )
    )


def _ivfpq_payload(index: IVFPQIndex) -> bytes:
    cb, params = index.codebook, index.params
    out = bytearray()
    out += _pack_image_table(index.dim, index.image_ids, index.image_dims)
    out += struct.pack(
        "<HBII",
        _check_u(params.m, 16, "m"),
        _check_u(params.nbits, 8, "nbits"),
        _check_u(params.nlist, 32, "nlist"),
        _check_u(params.nprobe, 32, "nprobe"),
    )
    out += struct.pack("<Q", _check_u(cb.seed, 64, "seed"))
    out += _pack_string(cb.pool_tag, "pool_tag")
    out += struct.pack("<I", cb.nlist)
    out += np.ascontiguousarray(cb.coarse, dtype="<f4").tobytes()
    out += np.ascontiguousarray(cb.sub_centroids, dtype="<f4").tobytes()
    out += struct.pack("<I", len(index.regions))
    for region in index.regions:
        out += _pack_rect(region)
    for lst in index.lists:
        n = int(lst.codes.shape[0])
        out += struct.pack("<I", n)
        out += lst.image_ord.astype("<u4").tobytes()
        out += lst.patch_ids.astype("<u2").tobytes()
        out += lst.region_index.astype("<u4").tobytes()
        out += np.ascontiguousarray(lst.codes, dtype=np.uint8).tobytes()
    return bytes(out)


def _parse_ivfpq(r: _Reader) -> IVFPQIndex:
    dim, image_ids, image_dims = _read_image_table(r)
    m, nbits, nlist_param, nprobe = r.unpack("<HBII", "pq params")
    try:
        params = PQParams(m=m, nlist=nlist_param, nbits=nbits, nprobe=nprobe)
    except ValueError as exc:
        raise CorruptFileError(f"invalid pq params: {exc}") from exc
    if dim % m != 0:
        raise CorruptFileError(f"dim {dim} not divisible by m {m}")
    seed = r.u64("seed")
    pool_tag = r.string("pool_tag")
    nlist_eff = r.u32("effective nlist")
    if not 1 <= nlist_eff <= nlist_param:
        raise CorruptFileError(f"effective nlist {nlist_eff} out of range")
    dsub = dim // m
    coarse = r.f32_array(nlist_eff * dim, "coarse centroids").reshape(nlist_eff, dim)
    subs = r.f32_array(m * 256 * dsub, "subquantizer centroids").reshape(m, 256, dsub)
    n_regions = r.u32("region count")
    regions = [_read_rect(r, f"region {i}") for i in range(n_regions)]
    cb = Codebook(sub_centroids=subs, coarse=coarse, seed=seed, pool_tag=pool_tag)
    lists = []
    for cell in range(nlist_eff):
        n = r.u32("list length")
        image_ord = np.frombuffer(r.take(4 * n, "image ordinals"), dtype="<u4").astype(np.int64)
        patch_ids = np.frombuffer(r.take(2 * n, "patch ids"), dtype="<u2").astype(np.int64)
        region_index = np.frombuffer(r.take(4 * n, "region indices"), dtype="<u4").astype(np.int64)
        codes = np.frombuffer(r.take(m * n, "codes"), dtype=np.uint8).reshape(n, m).copy()
        if n and (image_ord.max() >= len(image_ids) or region_index.max() >= n_regions):
            raise CorruptFileError(f"list {cell} references out-of-range entries")
        lists.append(
            InvertedList(
                image_ord=image_ord,
                patch_ids=patch_ids,
                region_index=region_index,
                codes=codes,
            )
        )
    return IVFPQIndex(
        params=params,
        codebook=cb,
        image_ids=image_ids,
        image_dims=image_dims,
        regions=regions,
        lists=lists,
    )


def write_index(index: FlatIndex | IVFPQIndex, path: str | Path) -> None:
    """Persist a flat or IVF-PQ index with a payload checksum."""
    if isinstance(index, FlatIndex):
        kind, payload = _KIND_FLAT, _flat_payload(index)
    elif isinstance(index, IVFPQIndex):
        kind, payload = _KIND_IVFPQ, _ivfpq_payload(index)
    else:
        raise TypeError("expected a FlatIndex or IVFPQIndex")
    header = struct.pack(
        "<4sHBI", INDEX_MAGIC, FORMAT_VERSION, kind, zlib.crc32(payload)
    )
    Path(path).write_bytes(header + payload)


def read_index(path: str | Path) -> FlatIndex | IVFPQIndex:
    """Read an index file; checksum failures surface as CorruptFileError."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != INDEX_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}; expected {INDEX_MAGIC!r}")
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported index file version {version}; expected {FORMAT_VERSION}"
        )
    kind = r.u8("index kind")
    crc = r.u32("payload checksum")
    payload = data[r.pos :]
    if zlib.crc32(payload) != crc:
        raise CorruptFileError(
            "payload checksum mismatch: file is truncated or corrupted"
        )
    pr = _Reader(payload, base_offset=r.pos)
    if kind == _KIND_FLAT:
        index: FlatIndex | IVFPQIndex = _parse_flat(pr)
    elif kind == _KIND_IVFPQ:
        index = _parse_ivfpq(pr)
    else:
        raise CorruptFileError(f"unknown index kind {kind}")
    if pr.remaining:
        raise CorruptFileError(f"{pr.remaining} trailing bytes at byte {pr.offset}")
    return index


# ---------------------------------------------------------------------------
# ground truth (JSON lines)


def write_ground_truth(queries: Sequence[QueryGroundTruth], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            doc = {
                "query_id": q.query_id,
                "descriptor_ref": q.descriptor_ref,
                "positives": [
                    {
                        "image_id": p.image_id,
                        "bbox": [p.box.x, p.box.y, p.box.w, p.box.h],
                        "width": p.width,
                        "height": p.height,
                    }
                    for p in q.positives
                ],
            }
            fh.write(json.dumps(doc) + "\n")


def read_ground_truth(path: str | Path) -> list[QueryGroundTruth]:
    """Parse a ground-truth JSONL file; malformed lines raise CorruptFileError."""
    out: list[QueryGroundTruth] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                positives = [
                    Positive(
                        image_id=p["image_id"],
                        box=PixelBox(*(int(v) for v in p["bbox"])),
                        width=int(p["width"]),
                        height=int(p["height"]),
                    )
                    for p in doc["positives"]
                ]
                out.append(
                    QueryGroundTruth(
                        query_id=doc["query_id"],
                        descriptor_ref=doc.get("descriptor_ref", doc["query_id"]),
                        positives=positives,
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorruptFileError(f"bad ground-truth line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# search results (JSON lines)


def ranked_list_to_json(ranked: RankedList) -> str:
    hits = [
        {
            "image_id": h.image_id,
            "score": h.score,
            "rank": h.rank,
            "best_patch_id": h.best_patch_id,
            "best_region": [h.best_region.x0, h.best_region.y0, h.best_region.x1, h.best_region.y1],
        }
        for h in ranked.hits
    ]
    return json.dumps({"query_id": ranked.query_id, "hits": hits})


def write_results(rankings: Iterable[RankedList], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in rankings:
            fh.write(ranked_list_to_json(ranked) + "\n")


def read_results(path: str | Path) -> list[RankedList]:
    """Parse a search-results JSONL file back into ranked lists."""
    out: list[RankedList] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                hits = [
                    RankedHit(
                        image_id=h["image_id"],
                        score=float(h["score"]),
                        best_patch_id=int(h["best_patch_id"]),
                        best_region=NormRect(*h["best_region"]),
                        rank=int(h["rank"]),
                    )
                    for h in doc["hits"]
                ]
                out.append(RankedList(query_id=doc["query_id"], hits=hits))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorruptFileError(f"bad results line {lineno}: {exc}") from exc
    return out
