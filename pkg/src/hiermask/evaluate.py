"""Class-agnostic mask evaluation: recall/precision and point-prompt IoU.

Matching follows the usual class-agnostic recall protocol: within each
image, predictions are visited in score order and each takes the best
still-unmatched ground-truth mask whose IoU clears the threshold. Average
precision uses the standard 101-point interpolated curve per threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from hiermask.masks import ScoredMask, center_point, contains_point, iou
from hiermask.postprocess import AnnotationSet, _rank_key

IOU_THRESHOLDS: Tuple[float, ...] = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

# Area buckets by pixel count (small < 32^2 <= medium <= 96^2 < large).
AREA_BUCKETS = {
    None: lambda a: True,
    "small": lambda a: a < 32**2,
    "medium": lambda a: 32**2 <= a <= 96**2,
    "large": lambda a: a > 96**2,
}


def _pair_by_image(
    preds: Sequence[AnnotationSet], gts: Sequence[AnnotationSet]
) -> List[Tuple[AnnotationSet, AnnotationSet]]:
    pmap = {p.image_id: p for p in preds}
    gmap = {g.image_id: g for g in gts}
    missing = sorted(str(i) for i in set(pmap) ^ set(gmap))
    if missing:
        raise ValueError(f"prediction/ground-truth image ids do not match: {missing}")
    return [(pmap[i], gmap[i]) for i in sorted(gmap, key=str)]


def _iou_matrix(pred_masks: Sequence[ScoredMask], gt_masks: Sequence[ScoredMask]) -> np.ndarray:
    out = np.zeros((len(pred_masks), len(gt_masks)))
    for i, p in enumerate(pred_masks):
        for j, g in enumerate(gt_masks):
            out[i, j] = iou(p.mask, g.mask)
    return out


def _greedy_matches(iou_row_per_pred: np.ndarray, thresh: float) -> List[Tuple[int, int]]:
    """Match predictions (already score-ordered) to ground truths at one threshold.

    Each prediction takes the unmatched ground truth with maximum IoU >=
    thresh; IoU ties resolve to the lowest ground-truth index.
    """
    n_pred, n_gt = iou_row_per_pred.shape
    taken = np.zeros(n_gt, dtype=bool)
    matches = []
    for i in range(n_pred):
        best_j, best_v = -1, thresh
        row = iou_row_per_pred[i]
        for j in range(n_gt):
            if not taken[j] and row[j] >= best_v and (best_j < 0 or row[j] > best_v):
                best_j, best_v = j, row[j]
        if best_j >= 0:
            taken[best_j] = True
            matches.append((i, best_j))
    return matches


def _ranked(masks: Sequence[ScoredMask], limit: Optional[int] = None) -> List[ScoredMask]:
    ranked = sorted(masks, key=_rank_key)
    return ranked if limit is None else ranked[:limit]


def recall_curve(
    preds: Sequence[AnnotationSet],
    gts: Sequence[AnnotationSet],
    max_dets: int = 1000,
    area_range: Optional[str] = None,
) -> Dict[float, float]:
    """Recall at each IoU threshold, pooled over all images."""
    if max_dets < 1:
        raise ValueError(f"max_dets must be >= 1, got {max_dets}")
    if area_range not in AREA_BUCKETS:
        raise ValueError(f"unknown area_range {area_range!r}")
    in_bucket = AREA_BUCKETS[area_range]

    matched = {t: 0 for t in IOU_THRESHOLDS}
    total_gt = 0
    for pset, gset in _pair_by_image(preds, gts):
        gt_masks = [g for g in gset.masks if in_bucket(g.area)]
        total_gt += len(gt_masks)
        if not gt_masks:
            continue
        pred_masks = _ranked(pset.masks, max_dets)
        ious = _iou_matrix(pred_masks, gt_masks)
        for t in IOU_THRESHOLDS:
            matched[t] += len(_greedy_matches(ious, t))
    if total_gt == 0:
        return {t: 0.0 for t in IOU_THRESHOLDS}
    return {t: matched[t] / total_gt for t in IOU_THRESHOLDS}


def average_recall(
    preds: Sequence[AnnotationSet],
    gts: Sequence[AnnotationSet],
    max_dets: int = 1000,
    area_range: Optional[str] = None,
) -> float:
    """Mean recall over the IoU thresholds 0.50:0.05:0.95."""
    curve = recall_curve(preds, gts, max_dets, area_range)
    return float(np.mean(list(curve.values())))


def average_precision(
    preds: Sequence[AnnotationSet],
    gts: Sequence[AnnotationSet],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> float:
    """101-point interpolated average precision, averaged over IoU thresholds."""
    pairs = _pair_by_image(preds, gts)
    per_image = []
    total_gt = 0
    for pset, gset in pairs:
        pred_masks = _ranked(pset.masks)
        ious = _iou_matrix(pred_masks, gset.masks)
        scores = np.array([m.score for m in pred_masks])
        per_image.append((scores, ious))
        total_gt += len(gset.masks)
    if total_gt == 0:
        return 0.0

    recall_points = np.linspace(0.0, 1.0, 101)
    ap_per_threshold = []
    for t in iou_thresholds:
        tp_flags: List[np.ndarray] = []
        all_scores: List[np.ndarray] = []
        for scores, ious in per_image:
            matched_pred = {i for i, _ in _greedy_matches(ious, t)}
            flags = np.zeros(len(scores), dtype=bool)
            flags[sorted(matched_pred)] = True
            tp_flags.append(flags)
            all_scores.append(scores)
        scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
        flags = np.concatenate(tp_flags) if tp_flags else np.zeros(0, dtype=bool)
        if scores.size == 0:
            ap_per_threshold.append(0.0)
            continue
        order = np.argsort(-scores, kind="stable")
        flags = flags[order]
        tp = np.cumsum(flags)
        fp = np.cumsum(~flags)
        recalls = tp / total_gt
        precisions = tp / (tp + fp)
        # Precision envelope: best precision at any recall >= r.
        for i in range(len(precisions) - 1, 0, -1):
            precisions[i - 1] = max(precisions[i - 1], precisions[i])
        idx = np.searchsorted(recalls, recall_points, side="left")
        sampled = np.where(idx < len(precisions), precisions[np.minimum(idx, len(precisions) - 1)], 0.0)
        ap_per_threshold.append(float(sampled.mean()))
    return float(np.mean(ap_per_threshold))


def point_prompt_eval(
    preds: AnnotationSet,
    gts: AnnotationSet,
    k: int = 6,
) -> Tuple[float, float]:
    """Point-prompt IoU means for one image.

    For each ground-truth mask the prompt is its center point; candidates
    are the top-k scored predictions containing that pixel. The first value
    averages the top candidate's IoU, the second the best IoU among the k
    candidates; a ground truth with no candidates contributes 0 to both.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not gts.masks:
        return 0.0, 0.0
    max_total = 0.0
    oracle_total = 0.0
    ranked = _ranked(preds.masks)
    for g in gts.masks:
        px, py = center_point(g.mask)
        candidates = [p for p in ranked if contains_point(p.mask, px, py)][:k]
        if candidates:
            max_total += iou(candidates[0].mask, g.mask)
            oracle_total += max(iou(c.mask, g.mask) for c in candidates)
    n = len(gts.masks)
    return max_total / n, oracle_total / n


@dataclass
class EvalReport:
    """Aggregate evaluation metrics over a collection of images."""

    ar_1000: float
    ar_small: float
    ar_medium: float
    ar_large: float
    ap: float
    recall_curve: Dict[float, float]
    max_iou: float
    oracle_iou: float
    n_images: int
    n_gt_masks: int
    n_pred_masks: int

    def __post_init__(self) -> None:
        metrics = [self.ar_1000, self.ar_small, self.ar_medium, self.ar_large,
                   self.ap, self.max_iou, self.oracle_iou]
        for v in metrics:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"metric out of [0, 1]: {v}")
        if self.oracle_iou < self.max_iou:
            raise ValueError(
                f"oracle_iou {self.oracle_iou} < max_iou {self.max_iou}"
            )

    def to_json(self) -> str:
        payload = {
            "ar_1000": self.ar_1000,
            "ar_small": self.ar_small,
            "ar_medium": self.ar_medium,
            "ar_large": self.ar_large,
            "ap": self.ap,
            "recall_curve": {f"{t:.2f}": r for t, r in self.recall_curve.items()},
            "max_iou": self.max_iou,
            "oracle_iou": self.oracle_iou,
            "n_images": self.n_images,
            "n_gt_masks": self.n_gt_masks,
            "n_pred_masks": self.n_pred_masks,
        }
        return json.dumps(payload, indent=2)

    def to_table(self) -> str:
        rows = [
            ("AR@1000", self.ar_1000),
            ("AR small", self.ar_small),
            ("AR medium", self.ar_medium),
            ("AR large", self.ar_large),
            ("AP", self.ap),
            ("MaxIoU", self.max_iou),
            ("OracleIoU", self.oracle_iou),
        ]
        lines = [f"images: {self.n_images}  gt masks: {self.n_gt_masks}  "
                 f"pred masks: {self.n_pred_masks}"]
        lines += [f"{name:<10} {value:8.4f}" for name, value in rows]
        return "\n".join(lines)


def build_report(
    preds: Sequence[AnnotationSet],
    gts: Sequence[AnnotationSet],
    k_point: int = 6,
    max_dets: int = 1000,
) -> EvalReport:
    """Run the full evaluation protocol over paired per-image annotation sets."""
    pairs = _pair_by_image(preds, gts)
    curve = recall_curve(preds, gts, max_dets=max_dets)
    point_pairs = [point_prompt_eval(p, g, k_point) for p, g in pairs if g.masks]
    if point_pairs:
        max_iou = float(np.mean([m for m, _ in point_pairs]))
        oracle_iou = float(np.mean([o for _, o in point_pairs]))
    else:
        max_iou = oracle_iou = 0.0
    return EvalReport(
        ar_1000=float(np.mean(list(curve.values()))),
        ar_small=average_recall(preds, gts, max_dets, "small"),
        ar_medium=average_recall(preds, gts, max_dets, "medium"),
        ar_large=average_recall(preds, gts, max_dets, "large"),
        ap=average_precision(preds, gts),
        recall_curve=curve,
        max_iou=max_iou,
        oracle_iou=oracle_iou,
        n_images=len(pairs),
        n_gt_masks=sum(len(g.masks) for g in gts),
        n_pred_masks=sum(len(p.masks) for p in preds),
    )
