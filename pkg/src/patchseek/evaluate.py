"""Retrieval metrics that reward localizing the instance, not just ranking it.

For one query with I_n annotated positive images, walking the ranking from
the top and counting h = positives seen so far at rank r:

    AP        = (1/I_n) * sum over retrieved positives of  h/r
    loc-AP    = (1/I_n) * sum over retrieved positives of (h/r) * IoU
    loc-AP(d) = (1/I_n) * sum over retrieved positives of (h/r) * [IoU >= d]

where IoU compares the ground-truth box with the best patch the index
attributed to that image, and an unretrieved positive contributes zero.
The threshold test is inclusive.  Aggregates are unweighted means over
queries, and the mean thresholded score averages loc-AP(d) over a
threshold set (0.3, 0.4, 0.5 by default).  loc-AP can never exceed AP.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import PixelBox, bbox_ratio, center_distance, iou, to_pixel
from .index import RankedList

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5)
DEFAULT_K = 1000


@dataclass(frozen=True)
class Positive:
    """One annotated positive for a query: the image and where the instance is."""

    image_id: str
    box: PixelBox
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("positive image dimensions must be >= 1")


@dataclass
class QueryGroundTruth:
    query_id: str
    descriptor_ref: str
    positives: list[Positive]


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    k: int = DEFAULT_K

    def __post_init__(self) -> None:
        if not self.thresholds:
            raise ValueError("threshold set must be non-empty")
        if any(not 0.0 < t <= 1.0 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def _retrieved(
    ranked: RankedList, positives: Sequence[Positive], k: int
) -> list[tuple[float, float]]:
    """(h/r, IoU) for each positive retrieved within the top k."""
    if not positives:
        raise ValueError("metrics are undefined for a query with no positives")
    by_id: dict[str, Positive] = {}
    for p in positives:
        if p.image_id in by_id:
            raise ValueError(f"duplicate positive image_id {p.image_id!r}")
        by_id[p.image_id] = p
    out = []
    h = 0
    for i, hit in enumerate(ranked.hits):
        if hit.rank != i + 1:
            raise ValueError("ranked hits must carry consecutive ranks from 1")
        if hit.rank > k:
            break
        p = by_id.get(hit.image_id)
        if p is None:
            continue
        h += 1
        pred = to_pixel(hit.best_region, p.width, p.height)
        out.append((h / hit.rank, iou(p.box, pred)))
    return out


def average_precision(
    ranked: RankedList, positives: Sequence[Positive], k: int = DEFAULT_K
) -> float:
    return sum(w for w, _ in _retrieved(ranked, positives, k)) / len(positives)


def localization_ap(
    ranked: RankedList, positives: Sequence[Positive], k: int = DEFAULT_K
) -> float:
    """AP with every term damped by how well the best patch covers the box."""
    return sum(w * v for w, v in _retrieved(ranked, positives, k)) / len(positives)


def localization_ap_thresholded(
    ranked: RankedList,
    positives: Sequence[Positive],
    delta: float,
    k: int = DEFAULT_K,
) -> float:
    """AP counting only hits whose IoU reaches `delta` (inclusive)."""
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    return sum(w for w, v in _retrieved(ranked, positives, k) if v >= delta) / len(positives)


def threshold_mean(scores: Sequence[float]) -> float:
    """Mean of per-threshold scores; the summary number of the family."""
    if not scores:
        raise ValueError("cannot average an empty score list")
    return float(sum(scores)) / len(scores)


@dataclass
class QueryEval:
    query_id: str
    n_positives: int
    ap: float
    loc_ap: float
    loc_ap_at: dict[float, float]


@dataclass
class SliceBin:
    lo: float
    hi: float
    n_queries: int
    n_positives: int
    map: float
    loc_ap: float
    loc_ap_at: dict[float, float]
    mean_loc_ap: float


@dataclass
class SliceReport:
    axis: str
    equal_count: bool
    edges: list[float]
    bins: list[SliceBin]


@dataclass
class EvalReport:
    k: int
    thresholds: tuple[float, ...]
    n_queries: int
    map: float
    loc_ap: float
    loc_ap_at: dict[float, float]
    mean_loc_ap: float
    per_query: list[QueryEval]
    slices: SliceReport | None = None

    def to_dict(self) -> dict:
        doc = {
            "k": self.k,
            "thresholds": list(self.thresholds),
            "n_queries": self.n_queries,
            "map": self.map,
            "loc_ap": self.loc_ap,
            "loc_ap_at": {f"{t:g}": v for t, v in self.loc_ap_at.items()},
            "mean_loc_ap": self.mean_loc_ap,
            "per_query": [
                {
                    "query_id": q.query_id,
                    "n_positives": q.n_positives,
                    "ap": q.ap,
                    "loc_ap": q.loc_ap,
                    "loc_ap_at": {f"{t:g}": v for t, v in q.loc_ap_at.items()},
                }
                for q in self.per_query
            ],
        }
        if self.slices is not None:
            doc["slices"] = {
                "axis": self.slices.axis,
                "equal_count": self.slices.equal_count,
                "edges": self.slices.edges,
                "bins": [
                    {
                        "lo": b.lo,
                        "hi": b.hi,
                        "n_queries": b.n_queries,
                        "n_positives": b.n_positives,
                        "map": b.map,
                        "loc_ap": b.loc_ap,
                        "loc_ap_at": {f"{t:g}": v for t, v in b.loc_ap_at.items()},
                        "mean_loc_ap": b.mean_loc_ap,
                    }
                    for b in self.slices.bins
                ],
            }
        return doc


def _eval_group(
    pairs: list[tuple[RankedList, list[Positive]]], config: EvalConfig
) -> tuple[float, float, dict[float, float], float]:
    """Aggregate means over a group of (ranking, positives) pairs."""
    aps, locs = [], []
    at: dict[float, list[float]] = {t: [] for t in config.thresholds}
    for ranked, positives in pairs:
        terms = _retrieved(ranked, positives, config.k)
        n = len(positives)
        aps.append(sum(w for w, _ in terms) / n)
        locs.append(sum(w * v for w, v in terms) / n)
        for t in config.thresholds:
            at[t].append(sum(w for w, v in terms if v >= t) / n)
    map_ = float(np.mean(aps))
    loc = float(np.mean(locs))
    loc_at = {t: float(np.mean(vals)) for t, vals in at.items()}
    mean_loc = threshold_mean(list(loc_at.values()))
    return map_, loc, loc_at, mean_loc


def evaluate_rankings(
    ground_truth: Sequence[QueryGroundTruth],
    rankings: Mapping[str, RankedList],
    config: EvalConfig = EvalConfig(),
    slice_axis: str | None = None,
    slice_bins: int = 5,
    slice_equal_count: bool = False,
) -> EvalReport:
    """Score a set of rankings against ground truth.

    Every ranking must have ground truth; ground-truth queries without a
    ranking are skipped with a warning.
    """
    gt_by_id = {g.query_id: g for g in ground_truth}
    missing = sorted(set(rankings) - set(gt_by_id))
    if missing:
        raise ValueError(f"queries without ground truth: {', '.join(missing)}")
    skipped = sorted(set(gt_by_id) - set(rankings))
    if skipped:
        warnings.warn(
            f"{len(skipped)} ground-truth queries have no ranking: {', '.join(skipped)}",
            RuntimeWarning,
            stacklevel=2,
        )
    if not rankings:
        raise ValueError("nothing to evaluate: no rankings given")

    query_ids = sorted(rankings)
    per_query = []
    pairs = []
    for qid in query_ids:
        ranked, positives = rankings[qid], gt_by_id[qid].positives
        terms = _retrieved(ranked, positives, config.k)
        n = len(positives)
        per_query.append(
            QueryEval(
                query_id=qid,
                n_positives=n,
                ap=sum(w for w, _ in terms) / n,
                loc_ap=sum(w * v for w, v in terms) / n,
                loc_ap_at={
                    t: sum(w for w, v in terms if v >= t) / n for t in config.thresholds
                },
            )
        )
        pairs.append((ranked, positives))

    map_, loc, loc_at, mean_loc = _eval_group(pairs, config)
    slices = None
    if slice_axis is not None:
        slices = slice_eval(
            ground_truth,
            rankings,
            slice_axis,
            bins=slice_bins,
            config=config,
            equal_count=slice_equal_count,
        )
    return EvalReport(
        k=config.k,
        thresholds=config.thresholds,
        n_queries=len(query_ids),
        map=map_,
        loc_ap=loc,
        loc_ap_at=loc_at,
        mean_loc_ap=mean_loc,
        per_query=per_query,
        slices=slices,
    )


_SLICE_AXES = {"bbox_ratio", "center_distance"}


def _positive_value(p: Positive, axis: str) -> float:
    if axis == "bbox_ratio":
        return bbox_ratio(p.box, p.width, p.height)
    return center_distance(p.box, p.width, p.height)


def slice_eval(
    ground_truth: Sequence[QueryGroundTruth],
    rankings: Mapping[str, RankedList],
    axis: str,
    bins: int = 5,
    config: EvalConfig = EvalConfig(),
    equal_count: bool = False,
) -> SliceReport:
    """Metrics stratified by a per-positive difficulty axis.

    Positives are bucketed into `bins` intervals over the observed value
    range (equal-width by default, quantile edges with `equal_count`).
    Within each bin a query is scored against only its positives that fall
    in the bin; queries with none are excluded from that bin.
    """
    if axis not in _SLICE_AXES:
        raise ValueError(f"unknown slice axis {axis!r}; expected one of {sorted(_SLICE_AXES)}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    gt_by_id = {g.query_id: g for g in ground_truth}
    query_ids = sorted(rankings)
    values = [
        _positive_value(p, axis) for qid in query_ids for p in gt_by_id[qid].positives
    ]
    if not values:
        raise ValueError("no positives to slice")
    vmin, vmax = min(values), max(values)
    if vmin == vmax:
        warnings.warn(
            f"all {axis} values are identical ({vmin:g}); using a single bin",
            RuntimeWarning,
            stacklevel=2,
        )
        edges = np.array([vmin, vmax])
    elif equal_count:
        edges = np.unique(np.quantile(values, np.linspace(0.0, 1.0, bins + 1)))
    else:
        edges = np.linspace(vmin, vmax, bins + 1)

    out_bins = []
    for b in range(len(edges) - 1):
        lo, hi = float(edges[b]), float(edges[b + 1])
        last = b == len(edges) - 2
        pairs = []
        n_pos = 0
        for qid in query_ids:
            sub = [
                p
                for p in gt_by_id[qid].positives
                if lo <= _positive_value(p, axis) < hi
                or (last and _positive_value(p, axis) == hi)
            ]
            if not sub:
                continue
            n_pos += len(sub)
            pairs.append((rankings[qid], sub))
        if not pairs:
            out_bins.append(
                SliceBin(
                    lo=lo, hi=hi, n_queries=0, n_positives=0, map=float("nan"),
                    loc_ap=float("nan"),
                    loc_ap_at={t: float("nan") for t in config.thresholds},
                    mean_loc_ap=float("nan"),
                )
            )
            continue
        map_, loc, loc_at, mean_loc = _eval_group(pairs, config)
        out_bins.append(
            SliceBin(
                lo=lo,
                hi=hi,
                n_queries=len(pairs),
                n_positives=n_pos,
                map=map_,
                loc_ap=loc,
                loc_ap_at=loc_at,
                mean_loc_ap=mean_loc,
            )
        )
    return SliceReport(
        axis=axis, equal_count=equal_count, edges=[float(e) for e in edges], bins=out_bins
    )
