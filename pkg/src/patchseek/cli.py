"""Command-line pipeline: synth -> build -> search -> eval / stats.

Every command is deterministic given its seeds and inputs; re-running
writes byte-identical outputs.  Runtime failures print one JSON error
line on stderr and exit nonzero.  A ``--config`` file (flat JSON object
keyed by flag dest names) supplies defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .embed import ImageRecord, PatchEntry, embed_image, synth_dataset, toy_embed
from .evaluate import EvalConfig, Positive, QueryGroundTruth, evaluate_rankings
from .geometry import (
    NormRect,
    PatchLevel,
    PixelBox,
    external_regions,
    grid_patches,
    sliding_windows,
)
from .index import FlatIndex, build_flat, search
from .quantize import (
    GT_PATCH_ID,
    PQParams,
    build_ivfpq,
    compression_stats,
    search_ivfpq,
    select_training_pool,
    train,
)
from .storage import (
    FileFormatError,
    ranked_list_to_json,
    read_embeddings,
    read_ground_truth,
    read_index,
    read_results,
    write_embeddings,
    write_ground_truth,
    write_index,
)

FULL = NormRect(0.0, 0.0, 1.0, 1.0)

_LEVELS = ("l0", "l1", "l2", "l3")
_STRATEGIES = ("grid", "sliding", "external")
_POOLS = ("l0", "l1", "l2", "l3", "gt")


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _note(doc: dict) -> None:
    print(json.dumps(doc), file=sys.stderr)


def _parse_pq(spec: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in str(spec).split(",")]
    if len(parts) not in (2, 3):
        raise ValueError(f"--pq expects 'm,nlist' or 'm,nlist,nbits', got {spec!r}")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise ValueError(f"--pq components must be integers, got {spec!r}") from None
    m, nlist = nums[0], nums[1]
    nbits = nums[2] if len(nums) == 3 else 8
    return m, nlist, nbits


def _parse_thresholds(spec: str) -> tuple[float, ...]:
    try:
        values = tuple(float(p) for p in str(spec).split(","))
    except ValueError:
        raise ValueError(f"--thresholds expects comma-separated floats, got {spec!r}") from None
    return values


def _patch_source(args) -> tuple[PatchLevel, "object"]:
    """Level plus either a fixed PatchSet or None for per-image externals."""
    level = PatchLevel.from_string(args.level)
    if args.strategy == "grid":
        return level, grid_patches(level)
    if args.strategy == "sliding":
        return level, sliding_windows(level, args.stride)
    if args.strategy == "external":
        return level, None
    raise ValueError(f"unknown strategy {args.strategy!r}; expected one of {_STRATEGIES}")


def _synth_proposals(rng: np.random.Generator, image_size: int, n: int) -> list[PixelBox]:
    boxes = []
    for _ in range(n):
        w = int(rng.integers(4, max(5, image_size // 2 + 1)))
        h = int(rng.integers(4, max(5, image_size // 2 + 1)))
        x = int(rng.integers(0, image_size - w + 1))
        y = int(rng.integers(0, image_size - h + 1))
        boxes.append(PixelBox(x, y, w, h))
    return boxes


def cmd_synth(args) -> int:
    if args.queries < 1:
        raise ValueError("--queries must be >= 1")
    if args.images_per_query < 1:
        raise ValueError("--images-per-query must be >= 1")
    if args.target_min > args.target_max:
        raise ValueError("--target-min must not exceed --target-max")
    _, patches = _patch_source(args)

    # one independent sub-corpus and planted texture per query, with an
    # extra stream for synthetic region proposals
    seeds = np.random.SeedSequence(args.seed).generate_state(args.queries + 1)
    ext_rng = np.random.default_rng(int(seeds[-1]))

    db_records: list[ImageRecord] = []
    query_records: list[ImageRecord] = []
    ground_truth: list[QueryGroundTruth] = []
    for qi in range(args.queries):
        ds = synth_dataset(
            n_images=args.images_per_query,
            image_size=args.image_size,
            target_size_range=(args.target_min, args.target_max),
            seed=int(seeds[qi]),
            n_positives=args.positives,
            id_prefix=f"g{qi:02d}-",
            keep_out_center_frac=args.keep_out,
            clutter=args.clutter,
            texture_cells=args.texture_cells,
            texture_smooth=not args.texture_blocky,
            align=args.align,
            align_jitter=args.jitter,
        )
        for im in ds.images:
            pset = patches
            if pset is None:
                boxes = _synth_proposals(ext_rng, args.image_size, args.proposals)
                if im.planted_box is not None:
                    boxes = [im.planted_box] + boxes
                pset = external_regions(boxes, args.image_size, args.image_size)
            db_records.append(embed_image(im.image_id, im.pixels, pset, args.dim, args.seed))
        qid = f"query{qi:02d}"
        qdesc = toy_embed(ds.texture, FULL, args.dim, args.seed)
        query_records.append(
            ImageRecord(qid, args.image_size, args.image_size, [PatchEntry(GT_PATCH_ID, FULL, qdesc)])
        )
        ground_truth.append(
            QueryGroundTruth(
                query_id=qid,
                descriptor_ref=qid,
                positives=[
                    Positive(image_id, box, args.image_size, args.image_size)
                    for image_id, box in sorted(ds.positives.items())
                ],
            )
        )
    write_embeddings(db_records, args.out_db, dim=args.dim)
    write_embeddings(query_records, args.out_queries, dim=args.dim)
    write_ground_truth(ground_truth, args.out_gt)
    _note(
        {
            "command": "synth",
            "images": len(db_records),
            "entries_per_image": len(db_records[0].entries),
            "queries": len(query_records),
            "dim": args.dim,
        }
    )
    return 0


def cmd_build(args) -> int:
    records = read_embeddings(args.embeddings)
    if not records:
        raise ValueError("embedding file contains no records")
    if args.kind == "flat":
        index = build_flat(records)
        write_index(index, args.out)
        _note(
            {
                "command": "build",
                "kind": "flat",
                "images": index.n_images,
                "rows": index.n_rows,
                "dim": index.dim,
            }
        )
        return 0
    if args.kind != "ivfpq":
        raise ValueError(f"unknown index kind {args.kind!r}; expected flat or ivfpq")
    m, nlist, nbits = _parse_pq(args.pq)
    params = PQParams(m=m, nlist=nlist, nbits=nbits, nprobe=args.nprobe)
    gt_boxes = None
    if args.pq_train_pool == "gt":
        if not args.gt:
            raise ValueError("--gt is required with --pq-train-pool gt")
        gt_boxes = {
            p.image_id: p.box for q in read_ground_truth(args.gt) for p in q.positives
        }
    pool = select_training_pool(records, args.pq_train_pool, gt_boxes)
    codebook = train(pool, params, seed=args.seed, pool_tag=args.pq_train_pool)
    index = build_ivfpq(records, codebook, params)
    write_index(index, args.out)
    _note(
        {
            "command": "build",
            "kind": "ivfpq",
            "images": index.n_images,
            "entries": index.total_entries,
            "dim": index.dim,
            "nlist": index.nlist,
            "pool": args.pq_train_pool,
            "pool_size": int(pool.shape[0]),
        }
    )
    return 0


def _query_descriptor(rec: ImageRecord) -> np.ndarray:
    if not rec.entries:
        raise ValueError(f"query record {rec.image_id!r} has no entries")
    direct = [e for e in rec.entries if e.patch_id == GT_PATCH_ID]
    if direct:
        return direct[0].descriptor
    return min(rec.entries, key=lambda e: e.patch_id).descriptor


def cmd_search(args) -> int:
    index = read_index(args.index)
    queries = read_embeddings(args.queries, expected_dim=index.dim)
    if not queries:
        raise ValueError("query file contains no records")
    flat = isinstance(index, FlatIndex)
    if flat and args.nprobe is not None:
        _note({"warning": "nprobe is ignored for a flat index"})
    lines = []
    for rec in queries:
        q = _query_descriptor(rec)
        if flat:
            ranked = search(index, q, args.k, query_id=rec.image_id)
        else:
            ranked = search_ivfpq(index, q, args.k, nprobe=args.nprobe, query_id=rec.image_id)
        lines.append(ranked_list_to_json(ranked))
    _emit("".join(line + "\n" for line in lines), args.out)
    return 0


def cmd_eval(args) -> int:
    results = read_results(args.results)
    rankings = {}
    for ranked in results:
        if ranked.query_id in rankings:
            raise ValueError(f"duplicate query_id {ranked.query_id!r} in results")
        rankings[ranked.query_id] = ranked
    ground_truth = read_ground_truth(args.gt)
    config = EvalConfig(thresholds=_parse_thresholds(args.thresholds), k=args.k)
    report = evaluate_rankings(
        ground_truth,
        rankings,
        config,
        slice_axis=args.slice,
        slice_bins=args.bins,
        slice_equal_count=args.equal_count,
    )
    _emit(json.dumps(report.to_dict(), indent=2) + "\n", args.out)
    return 0


def cmd_stats(args) -> int:
    index = read_index(args.index)
    stats = compression_stats(index)
    _emit(json.dumps(asdict(stats), indent=2) + "\n", args.out)
    return 0


_DISPATCH = {
    "synth": cmd_synth,
    "build": cmd_build,
    "search": cmd_search,
    "eval": cmd_eval,
    "stats": cmd_stats,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON object of default flag values")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")


def _build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="patchseek",
        description="patch-wise instance retrieval: synthesize, index, search, evaluate",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("synth", help="generate a synthetic corpus and embed it")
    p.add_argument("--out-db", required=True, help="database embedding file to write")
    p.add_argument("--out-queries", required=True, help="query embedding file to write")
    p.add_argument("--out-gt", required=True, help="ground-truth JSONL file to write")
    p.add_argument("--queries", type=int, default=4, help="number of planted textures")
    p.add_argument("--images-per-query", type=int, default=25)
    p.add_argument("--positives", type=int, default=3, help="positive images per query")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--target-min", type=int, default=16)
    p.add_argument("--target-max", type=int, default=17)
    p.add_argument("--keep-out", type=float, default=0.5,
                   help="central square fraction excluded from target centers")
    p.add_argument("--align", type=int, default=16, help="placement grid in pixels")
    p.add_argument("--jitter", type=int, default=1, help="max offset from the placement grid")
    p.add_argument("--clutter", type=float, default=0.0, help="background structure amplitude")
    p.add_argument("--texture-cells", type=int, default=4)
    p.add_argument("--texture-blocky", action="store_true",
                   help="nearest-neighbor texture instead of smooth bilinear")
    p.add_argument("--level", choices=_LEVELS, default="l3")
    p.add_argument("--strategy", choices=_STRATEGIES, default="grid")
    p.add_argument("--stride", type=float, default=0.5, help="sliding-window stride fraction")
    p.add_argument("--proposals", type=int, default=5,
                   help="synthetic region proposals per image (external strategy)")
    p.add_argument("--dim", type=int, default=64)
    _add_common(p)
    commands["synth"] = p

    p = sub.add_parser("build", help="build and persist an index from embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="index file to write")
    p.add_argument("--kind", choices=("flat", "ivfpq"), default="flat")
    p.add_argument("--pq", default="16,64", help="PQ shape as m,nlist or m,nlist,nbits")
    p.add_argument("--pq-train-pool", choices=_POOLS, default="l3")
    p.add_argument("--gt", help="ground-truth JSONL (required for the gt pool)")
    p.add_argument("--nprobe", type=int, default=8, help="default probes stored in the index")
    _add_common(p)
    commands["build"] = p

    p = sub.add_parser("search", help="rank database images for each query")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="query embedding file")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=None, help="override the stored nprobe")
    p.add_argument("--out", default="-", help="results JSONL path, or - for stdout")
    _add_common(p)
    commands["search"] = p

    p = sub.add_parser("eval", help="score search results against ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--thresholds", default="0.3,0.4,0.5")
    p.add_argument("--slice", choices=("bbox_ratio", "center_distance"), default=None)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--equal-count", action="store_true",
                   help="quantile slice bins instead of equal-width")
    p.add_argument("--out", default="-")
    _add_common(p)
    commands["eval"] = p

    p = sub.add_parser("stats", help="report compression accounting for an index")
    p.add_argument("--index", required=True)
    p.add_argument("--out", default="-")
    _add_common(p)
    commands["stats"] = p

    return parser, commands


def _config_overrides(path: str, command_parser: argparse.ArgumentParser) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path!r} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path!r} must hold a flat JSON object")
    # dest names of the chosen subcommand define the legal key set
    actions = {a.dest: a for a in command_parser._actions}
    overrides = {}
    for key, value in doc.items():
        if key in ("config", "help") or key not in actions:
            raise ValueError(f"unknown config key {key!r}")
        action = actions[key]
        if isinstance(value, str) and action.type is not None:
            value = action.type(value)
        if action.choices is not None and value not in action.choices:
            raise ValueError(
                f"config key {key!r} must be one of {sorted(action.choices)}"
            )
        overrides[key] = value
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser, commands = _build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            overrides = _config_overrides(args.config, commands[args.command])
            commands[args.command].set_defaults(**overrides)
            args = parser.parse_args(argv)
        return _DISPATCH[args.command](args)
    except (FileFormatError, ValueError, KeyError, TypeError, OSError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
