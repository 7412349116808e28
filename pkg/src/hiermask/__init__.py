"""Hierarchical pseudo-mask generation from precomputed patch feature grids.

The pipeline extracts coarse masks top-down with iterative normalized cuts,
refines each one bottom-up by merging adjacent patch clusters under a
descending similarity-threshold ladder, assembles the resulting multi-level
masks into per-image annotation sets, and evaluates them with class-agnostic
recall/precision and point-prompt protocols.
"""

from hiermask.masks import (
    BBox,
    BinaryMask,
    ScoredMask,
    bbox_of,
    center_point,
    contains_point,
    iou,
    rle_encode,
)
from hiermask.features import FeatureGrid, local_grid
from hiermask.divide import (
    AffinityMatrix,
    bipartition,
    cosine_affinity,
    divide_stage,
    iterative_ncut,
    mask_affinity,
    ncut_second_eigvec,
)
from hiermask.conquer import Cluster, Hierarchy, conquer, init_clusters, merge_pass
from hiermask.postprocess import (
    AnnotationSet,
    assemble_pseudo_labels,
    fuse_with_gt,
    identity_refiner,
    nms,
    refinement_filter,
    self_train_merge,
)
from hiermask.evaluate import (
    EvalReport,
    average_precision,
    average_recall,
    build_report,
    point_prompt_eval,
)
from hiermask.io import (
    PipelineConfig,
    load_config,
    read_annotation_set,
    read_feature_grid,
    write_annotation_set,
    write_feature_grid,
)

__version__ = "0.1.0"
