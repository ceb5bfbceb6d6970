"""Compression ratio of the quantized index across patch grid levels.

Embeds one fixed corpus at every level and reports raw versus compressed
byte counts for the resulting indexes.  Finer grids multiply the patch
count per image, so the ratio climbs with the level while the codebook
overhead stays fixed.

Usage:
    python3 scripts/compression_levels.py --images 60 --dim 256
"""

import argparse
import json

from patchseek.embed import embed_image, synth_dataset
from patchseek.geometry import PatchLevel, grid_patches
from patchseek.quantize import PQParams, build_ivfpq, compression_stats, select_training_pool, train


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=60)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--m", type=int, default=16)
    ap.add_argument("--nlist", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = synth_dataset(
        n_images=args.images,
        image_size=64,
        target_size_range=(16, 24),
        seed=args.seed,
        n_positives=args.images // 4,
    )
    params = PQParams(m=args.m, nlist=args.nlist)
    print(f"corpus: {args.images} images, dim {args.dim}, m={args.m} nlist={args.nlist}")
    print(f"{'level':<6} {'vectors':>8} {'raw_bytes':>10} {'compressed':>11} {'ratio':>7}")
    summary = {}
    for level in PatchLevel:
        patches = grid_patches(level)
        records = [
            embed_image(im.image_id, im.pixels, patches, args.dim, seed=0)
            for im in ds.images
        ]
        pool = select_training_pool(records, level.name.lower())
        codebook = train(pool, params, seed=args.seed)
        index = build_ivfpq(records, codebook, params)
        stats = compression_stats(index)
        summary[level.name.lower()] = {
            "vectors": stats.vector_count,
            "raw": stats.raw_bytes,
            "compressed": stats.compressed_bytes,
            "ratio": round(stats.ratio, 4),
        }
        print(
            f"{level.name.lower():<6} {stats.vector_count:>8} {stats.raw_bytes:>10}"
            f" {stats.compressed_bytes:>11} {stats.ratio:>7.3f}"
        )
    ratios = [v["ratio"] for v in summary.values()]
    print(json.dumps({"monotone_increasing": ratios == sorted(ratios), "levels": summary}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
