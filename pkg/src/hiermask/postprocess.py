"""Per-image pseudo-label assembly, deduplication, and label-set fusion."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

from hiermask.conquer import Hierarchy
from hiermask.masks import BinaryMask, MaskId, ScoredMask, iou, paste_into

Refiner = Callable[[BinaryMask], BinaryMask]

DEFAULT_NMS_IOU = 0.9
DEFAULT_DELTA_THRESH = 0.5
DEFAULT_MIN_AREA = 100


@dataclass
class AnnotationSet:
    """All scored masks of one image."""

    image_id: MaskId
    height: int
    width: int
    masks: List[ScoredMask] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image dimensions must be positive, got {self.height}x{self.width}")
        seen = set()
        for m in self.masks:
            if (m.mask.height, m.mask.width) != (self.height, self.width):
                raise ValueError(
                    f"mask {m.mask_id!r} is {m.mask.height}x{m.mask.width}, "
                    f"image is {self.height}x{self.width}"
                )
            if m.mask_id is not None:
                if m.mask_id in seen:
                    raise ValueError(f"duplicate mask id {m.mask_id!r}")
                seen.add(m.mask_id)

    def __len__(self) -> int:
        return len(self.masks)


def _rank_key(m: ScoredMask):
    """Score-descending order; ties prefer larger area, then smaller id."""
    return (-m.score, -m.area, m.mask_id is None, str(m.mask_id))


def nms(masks: Sequence[ScoredMask], iou_thresh: float = DEFAULT_NMS_IOU) -> List[ScoredMask]:
    """Greedy non-maximum suppression; survivors are returned in rank order."""
    if not (0.0 < iou_thresh <= 1.0):
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    kept: List[ScoredMask] = []
    for m in sorted(masks, key=_rank_key):
        if all(iou(m.mask, k.mask) < iou_thresh for k in kept):
            kept.append(m)
    return kept


def identity_refiner(mask: BinaryMask) -> BinaryMask:
    """Default no-op refiner standing in for external edge-refinement models."""
    return mask


def refinement_filter(
    masks: Sequence[ScoredMask],
    refiner: Refiner = identity_refiner,
    delta_thresh: float = DEFAULT_DELTA_THRESH,
) -> List[ScoredMask]:
    """Refine each mask and drop those that changed too much.

    A mask is kept iff IoU(original, refined) >= delta_thresh; kept masks
    carry the refined geometry. The identity refiner therefore drops nothing.
    """
    if not (0.0 <= delta_thresh <= 1.0):
        raise ValueError(f"delta_thresh must be in [0, 1], got {delta_thresh}")
    out: List[ScoredMask] = []
    for m in masks:
        refined = refiner(m.mask)
        if (refined.height, refined.width) != (m.mask.height, m.mask.width):
            raise ValueError(
                f"refiner changed mask dimensions from {m.mask.height}x{m.mask.width} "
                f"to {refined.height}x{refined.width}"
            )
        if iou(m.mask, refined) >= delta_thresh:
            out.append(replace(m, mask=refined))
    return out


def part_to_global(part: ScoredMask, hierarchy: Hierarchy, height: int, width: int) -> ScoredMask:
    """Map a local-crop part mask back into full-image coordinates."""
    box = hierarchy.bbox
    if box.x2 > width or box.y2 > height:
        raise ValueError(
            f"parent bbox {box} falls outside the {width}x{height} image"
        )
    return replace(part, mask=paste_into(part.mask, box, height, width))


def assemble_pseudo_labels(
    divide_masks: Sequence[ScoredMask],
    hierarchies: Sequence[Hierarchy],
    nms_thresh: float = DEFAULT_NMS_IOU,
    min_area: int = DEFAULT_MIN_AREA,
    *,
    image_id: MaskId = "image",
    height: Optional[int] = None,
    width: Optional[int] = None,
    refiner: Optional[Refiner] = None,
    delta_thresh: float = DEFAULT_DELTA_THRESH,
    refine_before_nms: bool = True,
) -> AnnotationSet:
    """Union of coarse masks and globally-mapped part masks, deduplicated.

    Masks below ``min_area`` pixels are removed before deduplication. When a
    refiner is supplied it runs with its IoU-delta filter either before NMS
    (default) or after.
    """
    if height is None or width is None:
        if divide_masks:
            height = divide_masks[0].mask.height
            width = divide_masks[0].mask.width
        elif hierarchies:
            height = hierarchies[0].parent.mask.height
            width = hierarchies[0].parent.mask.width
        else:
            raise ValueError("cannot infer image dimensions from empty inputs")

    pool: List[ScoredMask] = []
    for i, m in enumerate(divide_masks):
        pool.append(m if m.mask_id is not None else replace(m, mask_id=f"d{i}"))
    for h in hierarchies:
        for part in h.parts:
            pool.append(part_to_global(part, h, height, width))

    pool = [m for m in pool if m.area >= min_area]
    if refiner is not None and refine_before_nms:
        pool = refinement_filter(pool, refiner, delta_thresh)
    survivors = nms(pool, nms_thresh)
    if refiner is not None and not refine_before_nms:
        survivors = refinement_filter(survivors, refiner, delta_thresh)
    return AnnotationSet(image_id=image_id, height=height, width=width, masks=survivors)


def _require_same_image(a: AnnotationSet, b: AnnotationSet) -> None:
    if a.image_id != b.image_id:
        raise ValueError(f"image_id mismatch: {a.image_id!r} vs {b.image_id!r}")
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"image dimension mismatch: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def _dedup_id(mask: ScoredMask, taken: set, prefix: str) -> ScoredMask:
    mid = mask.mask_id
    if mid is None or mid in taken:
        base = f"{prefix}:{mid}" if mid is not None else prefix
        mid = base
        k = 1
        while mid in taken:
            mid = f"{base}#{k}"
            k += 1
        mask = replace(mask, mask_id=mid)
    taken.add(mask.mask_id)
    return mask


def self_train_merge(
    pseudo: AnnotationSet,
    predictions: AnnotationSet,
    tau_self: float = 0.7,
    dedup_iou: float = 0.5,
) -> AnnotationSet:
    """Adopt confident predictions and drop pseudo masks they duplicate.

    Predictions with score > tau_self are kept; pseudo masks whose IoU with
    any kept prediction exceeds dedup_iou are removed. The result is the
    kept predictions followed by the surviving pseudo masks.
    """
    if not (0.0 <= tau_self <= 1.0):
        raise ValueError(f"tau_self must be in [0, 1], got {tau_self}")
    if not (0.0 < dedup_iou <= 1.0):
        raise ValueError(f"dedup_iou must be in (0, 1], got {dedup_iou}")
    _require_same_image(pseudo, predictions)

    kept = [m for m in predictions.masks if m.score > tau_self]
    surviving = [
        g for g in pseudo.masks if all(iou(g.mask, k.mask) <= dedup_iou for k in kept)
    ]
    taken: set = set()
    out = [_dedup_id(m if m.provenance else replace(m, provenance="prediction"), taken, "pred")
           for m in kept]
    out += [_dedup_id(m if m.provenance else replace(m, provenance="pseudo"), taken, "pseudo")
            for m in surviving]
    return AnnotationSet(pseudo.image_id, pseudo.height, pseudo.width, out)


def fuse_with_gt(
    gt: AnnotationSet,
    unsup: AnnotationSet,
    tau_plus: float = 0.02,
) -> AnnotationSet:
    """Add unsupervised masks that barely overlap any ground-truth mask.

    Ground-truth masks pass through untouched; an unsupervised mask is added
    iff its maximum IoU against all ground-truth masks is <= tau_plus (so
    with an empty ground truth every unsupervised mask is added).
    """
    if not (0.0 <= tau_plus <= 1.0):
        raise ValueError(f"tau_plus must be in [0, 1], got {tau_plus}")
    _require_same_image(gt, unsup)

    taken = {m.mask_id for m in gt.masks if m.mask_id is not None}
    out = list(gt.masks)
    for m in unsup.masks:
        best = max((iou(m.mask, g.mask) for g in gt.masks), default=0.0)
        if best <= tau_plus:
            tagged = m if m.provenance else replace(m, provenance="unsupervised")
            out.append(_dedup_id(tagged, taken, "unsup"))
    return AnnotationSet(gt.image_id, gt.height, gt.width, out)
