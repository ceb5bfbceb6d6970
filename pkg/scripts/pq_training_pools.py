"""Retrieval quality of compressed indexes across PQ training pools.

Trains one codebook per pool strategy on the same corpus with the same
seed, builds a compressed index from each, and compares mean average
precision against the uncompressed baseline.  The "gt" pool trains on
one descriptor per annotated target, "l0".."l3" take every patch up to
that level, and "background" takes only patches of negative images.
"""

import argparse
import json

import numpy as np

from patchseek.embed import ImageRecord, PatchEntry, embed_image, synth_dataset, toy_embed
from patchseek.evaluate import EvalConfig, Positive, QueryGroundTruth, evaluate_rankings
from patchseek.geometry import NormRect, PatchLevel, grid_patches
from patchseek.index import build_flat, search
from patchseek.quantize import (
    GT_PATCH_ID,
    PQParams,
    build_ivfpq,
    search_ivfpq,
    select_training_pool,
    train,
)

FULL = NormRect(0.0, 0.0, 1.0, 1.0)
IMAGE_SIZE = 64


def build_benchmark(n_queries: int, images_per_query: int, positives: int,
                    dim: int, seed: int):
    """Multi-texture corpus: one planted texture and sub-corpus per query."""
    patches = grid_patches(PatchLevel.L3)
    seeds = np.random.SeedSequence(seed).generate_state(n_queries)
    records: list[ImageRecord] = []
    queries: list[tuple[str, np.ndarray]] = []
    ground_truth: list[QueryGroundTruth] = []
    for qi in range(n_queries):
        ds = synth_dataset(
            n_images=images_per_query,
            image_size=IMAGE_SIZE,
            target_size_range=(16, 17),
            seed=int(seeds[qi]),
            n_positives=positives,
            id_prefix=f"g{qi:02d}-",
            keep_out_center_frac=0.5,
            align=16,
            align_jitter=1,
        )
        records += [
            embed_image(im.image_id, im.pixels, patches, dim, seed=0)
            for im in ds.images
        ]
        qid = f"query{qi:02d}"
        queries.append((qid, toy_embed(ds.texture, FULL, dim, seed=0)))
        ground_truth.append(QueryGroundTruth(
            query_id=qid,
            descriptor_ref=qid,
            positives=[
                Positive(image_id, box, IMAGE_SIZE, IMAGE_SIZE)
                for image_id, box in sorted(ds.positives.items())
            ],
        ))
    return records, queries, ground_truth


def background_pool(records, ground_truth) -> np.ndarray:
    """Every patch descriptor from images with no annotated target."""
    positive_ids = {p.image_id for q in ground_truth for p in q.positives}
    vectors = [
        e.descriptor for r in records if r.image_id not in positive_ids for e in r.entries
    ]
    return np.stack(vectors)


def mean_ap(ground_truth, rankings, k: int) -> float:
    return evaluate_rankings(ground_truth, rankings, EvalConfig(k=k)).map


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=6)
    ap.add_argument("--images-per-query", type=int, default=12)
    ap.add_argument("--positives", type=int, default=3)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--m", type=int, default=16)
    ap.add_argument("--nlist", type=int, default=16)
    ap.add_argument("--nprobe", type=int, default=8)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pools", default="gt,l0,l3,background")
    args = ap.parse_args()

    records, queries, ground_truth = build_benchmark(
        args.queries, args.images_per_query, args.positives, args.dim, args.seed
    )
    gt_boxes = {p.image_id: p.box for q in ground_truth for p in q.positives}
    flat = build_flat(records)
    flat_map = mean_ap(
        ground_truth,
        {qid: search(flat, vec, args.k, query_id=qid) for qid, vec in queries},
        args.k,
    )
    print(f"corpus: {len(records)} images, {flat.n_rows} patch vectors, dim {args.dim}")
    print(f"{'pool':<11} {'pool_size':>9} {'map':>8} {'vs_flat':>8}")
    print(f"{'(flat)':<11} {'-':>9} {flat_map:>8.4f} {'-':>8}")

    params = PQParams(m=args.m, nlist=args.nlist, nprobe=args.nprobe)
    summary = {"flat_map": flat_map, "pools": {}}
    for pool_name in args.pools.split(","):
        if pool_name == "background":
            pool = background_pool(records, ground_truth)
        else:
            pool = select_training_pool(records, pool_name, gt_boxes)
        codebook = train(pool, params, seed=args.seed, pool_tag=pool_name)
        index = build_ivfpq(records, codebook, params)
        rankings = {
            qid: search_ivfpq(index, vec, args.k, query_id=qid)
            for qid, vec in queries
        }
        pool_map = mean_ap(ground_truth, rankings, args.k)
        summary["pools"][pool_name] = {"pool_size": len(pool), "map": pool_map}
        print(
            f"{pool_name:<11} {len(pool):>9} {pool_map:>8.4f}"
            f" {pool_map - flat_map:>+8.4f}"
        )
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
