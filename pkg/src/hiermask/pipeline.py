"""End-to-end per-image orchestration: divide, conquer, assemble."""

from __future__ import annotations

from dataclasses import replace
from typing import List, Optional, Sequence

from hiermask.conquer import Hierarchy, MaskTooSmallError, conquer
from hiermask.divide import divide_stage
from hiermask.features import FeatureGrid, local_grid
from hiermask.io import PipelineConfig
from hiermask.masks import MaskId, ScoredMask, bbox_of
from hiermask.postprocess import AnnotationSet, Refiner, assemble_pseudo_labels


def coarse_masks(
    grid: Optional[FeatureGrid],
    proposals: Optional[AnnotationSet],
    config: PipelineConfig,
) -> List[ScoredMask]:
    """Divide-stage masks with ids assigned, from proposals when supplied."""
    if proposals is not None:
        masks = divide_stage(proposals.masks, tau=config.tau)
    elif grid is not None:
        masks = divide_stage(
            grid,
            tau=config.tau,
            t_max=config.t_max,
            tau_ncut=config.tau_ncut,
            epsilon=config.epsilon,
        )
    else:
        raise ValueError("need a feature grid or a proposal set")
    return [
        m if m.mask_id is not None else replace(m, mask_id=f"d{i}")
        for i, m in enumerate(masks)
    ]


def conquer_all(
    grid: FeatureGrid,
    parents: Sequence[ScoredMask],
    config: PipelineConfig,
    local_grid_side: Optional[int] = None,
) -> List[Hierarchy]:
    """Run conquer on every parent; parents too small to split are skipped.

    Each parent gets a feature sub-grid for its bounding box. By default the
    sub-grid keeps one patch per covered source patch (an exact crop for
    patch-aligned parents); ``local_grid_side`` forces a square resampled
    grid instead, mirroring a fixed-size crop re-extraction.
    """
    ps = grid.patch_size
    hierarchies: List[Hierarchy] = []
    for parent in parents:
        if (parent.mask.height, parent.mask.width) != (grid.pixel_height, grid.pixel_width):
            raise ValueError(
                f"parent mask {parent.mask_id!r} is {parent.mask.height}x{parent.mask.width} "
                f"but the feature grid covers {grid.pixel_height}x{grid.pixel_width} pixels"
            )
        box = bbox_of(parent.mask)
        if local_grid_side is None:
            span_h = (box.y2 + ps - 1) // ps - box.y1 // ps
            span_w = (box.x2 + ps - 1) // ps - box.x1 // ps
            if span_h * span_w < 4:
                continue  # bbox cannot host a valid local grid
        sub = local_grid(grid, box, local_grid_side)
        try:
            hierarchies.append(conquer(parent, sub, config.thetas))
        except MaskTooSmallError:
            continue
    return hierarchies


def run_image(
    grid: Optional[FeatureGrid],
    config: PipelineConfig,
    proposals: Optional[AnnotationSet] = None,
    *,
    image_id: MaskId = "image",
    local_grid_side: Optional[int] = None,
    refiner: Optional[Refiner] = None,
    delta_thresh: float = 0.5,
    refine_before_nms: bool = True,
) -> AnnotationSet:
    """Full pipeline for one image: coarse masks, hierarchies, assembled labels."""
    parents = coarse_masks(grid, proposals, config)
    hierarchies = conquer_all(grid, parents, config, local_grid_side) if grid is not None else []
    if grid is not None:
        height, width = grid.pixel_height, grid.pixel_width
    elif proposals is not None:
        height, width = proposals.height, proposals.width
    else:
        raise ValueError("need a feature grid or a proposal set")
    return assemble_pseudo_labels(
        parents,
        hierarchies,
        nms_thresh=config.nms_iou,
        min_area=config.min_area,
        image_id=image_id,
        height=height,
        width=width,
        refiner=refiner,
        delta_thresh=delta_thresh,
        refine_before_nms=refine_before_nms,
    )
