"""Patch-wise instance retrieval with multi-scale grids and IVF-PQ compression."""

from .embed import (
    ImageRecord,
    PatchEntry,
    SynthDataset,
    SynthImage,
    embed_image,
    normalize,
    synth_dataset,
    toy_embed,
)
from .evaluate import (
    EvalConfig,
    EvalReport,
    Positive,
    QueryGroundTruth,
    average_precision,
    evaluate_rankings,
    localization_ap,
    localization_ap_thresholded,
    slice_eval,
    threshold_mean,
)
from .geometry import (
    NormRect,
    PatchLevel,
    PatchSet,
    PixelBox,
    external_regions,
    grid_patches,
    iou,
    sliding_windows,
    to_pixel,
)
from .index import FlatIndex, RankedHit, RankedList, best_patch, build_flat, search
from .quantize import (
    GT_PATCH_ID,
    Codebook,
    CompressionStats,
    IVFPQIndex,
    PQCode,
    PQParams,
    adc_tables,
    build_ivfpq,
    compression_accounting,
    compression_stats,
    decode,
    encode,
    kmeans,
    search_ivfpq,
    select_training_pool,
    train,
)
from .storage import (
    BadMagicError,
    CorruptFileError,
    DimensionMismatchError,
    FileFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
    read_embeddings,
    read_ground_truth,
    read_index,
    read_results,
    write_embeddings,
    write_ground_truth,
    write_index,
    write_results,
)

__version__ = "0.1.0"
