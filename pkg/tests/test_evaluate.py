"""Metric tests: hand-computed AR/AP cases, matcher oracle, point prompts."""

import itertools

import numpy as np
import pytest

from hiermask.evaluate import (
    IOU_THRESHOLDS,
    average_precision,
    average_recall,
    build_report,
    point_prompt_eval,
    recall_curve,
)
from hiermask.masks import ScoredMask, iou, rle_encode
from hiermask.postprocess import AnnotationSet


def box_mask(h, w, y0, y1, x0, x1):
    bits = np.zeros((h, w), dtype=bool)
    bits[y0:y1, x0:x1] = True
    return rle_encode(bits)


def scored(mask, score, mask_id):
    return ScoredMask(mask=mask, score=score, mask_id=mask_id)


def aset(masks, image_id="img", h=32, w=32):
    return AnnotationSet(image_id, h, w, masks)


class TestAverageRecall:
    def test_perfect_predictions(self):
        masks = [scored(box_mask(32, 32, 0, 8, 0, 8), 0.9, "a"),
                 scored(box_mask(32, 32, 10, 20, 10, 20), 0.8, "b")]
        assert average_recall([aset(masks)], [aset(masks)]) == 1.0

    def test_no_predictions(self):
        gts = [aset([scored(box_mask(32, 32, 0, 8, 0, 8), 1.0, "a")])]
        assert average_recall([aset([])], gts) == 0.0

    def test_single_partial_match_hand_computed(self):
        # 2 GTs; one prediction overlaps one GT at IoU exactly 0.7
        # (7 of 10 pixels) -> recall 0.5 for the 5 thresholds <= 0.70, else 0.
        gt1 = box_mask(32, 32, 0, 10, 0, 1)
        gt2 = box_mask(32, 32, 0, 10, 5, 6)
        pred = box_mask(32, 32, 0, 7, 0, 1)
        assert iou(pred, gt1) == 0.7
        ar = average_recall([aset([scored(pred, 0.9, "p")])],
                            [aset([scored(gt1, 1.0, "g1"), scored(gt2, 1.0, "g2")])])
        assert ar == pytest.approx(0.25, abs=1e-9)

    def test_max_dets_truncation(self):
        gt = box_mask(32, 32, 0, 8, 0, 8)
        decoy = box_mask(32, 32, 20, 28, 20, 28)
        preds = [scored(decoy, 0.9, "high"), scored(gt, 0.5, "low")]
        gts = [aset([scored(gt, 1.0, "g")])]
        assert average_recall([aset(preds)], gts, max_dets=1) == 0.0
        assert average_recall([aset(preds)], gts, max_dets=2) == 1.0

    def test_area_buckets(self):
        small = box_mask(256, 256, 0, 10, 0, 10)        # 100 < 32^2
        medium = box_mask(256, 256, 20, 84, 20, 84)     # 4096 in [1024, 9216]
        large = box_mask(256, 256, 100, 200, 100, 200)  # 10000 > 9216
        masks = [scored(small, 0.9, "s"), scored(medium, 0.8, "m"), scored(large, 0.7, "l")]
        preds = [aset(masks, h=256, w=256)]
        gts = [aset(masks, h=256, w=256)]
        for bucket in ("small", "medium", "large"):
            assert average_recall(preds, gts, area_range=bucket) == 1.0
        only_small = [aset([scored(small, 0.9, "s")], h=256, w=256)]
        assert average_recall(only_small, gts, area_range="large") == 0.0

    def test_unmatched_image_ids_error(self):
        with pytest.raises(ValueError, match="ids"):
            average_recall([aset([], image_id="a")], [aset([], image_id="b")])

    def test_adding_correct_prediction_never_decreases(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            gt_masks = []
            for i in range(3):
                y0, x0 = int(rng.integers(0, 24)), int(rng.integers(0, 24))
                y1 = int(rng.integers(y0 + 1, 32))
                x1 = int(rng.integers(x0 + 1, 32))
                gt_masks.append(scored(box_mask(32, 32, y0, y1, x0, x1), 1.0, f"g{i}"))
            preds = [scored(gt_masks[0].mask, 0.5, "p0")]
            base = average_recall([aset(preds)], [aset(gt_masks)])
            more = preds + [scored(gt_masks[-1].mask, 0.4, "p1")]
            assert average_recall([aset(more)], [aset(gt_masks)]) >= base


class TestAveragePrecision:
    def test_perfect(self):
        masks = [scored(box_mask(32, 32, 0, 8, 0, 8), 0.9, "a")]
        assert average_precision([aset(masks)], [aset(masks)]) == 1.0

    def test_all_spurious(self):
        gt = [aset([scored(box_mask(32, 32, 0, 8, 0, 8), 1.0, "g")])]
        preds = [aset([scored(box_mask(32, 32, 20, 28, 20, 28), 0.9, "p")])]
        assert average_precision(preds, gt) == 0.0

    def test_correct_ranked_first_vs_second(self):
        gt_mask = box_mask(32, 32, 0, 8, 0, 8)
        junk = box_mask(32, 32, 20, 28, 20, 28)
        gts = [aset([scored(gt_mask, 1.0, "g")])]
        good_first = [aset([scored(gt_mask, 0.9, "hit"), scored(junk, 0.1, "miss")])]
        assert average_precision(good_first, gts) == pytest.approx(1.0, abs=1e-9)
        good_second = [aset([scored(junk, 0.9, "miss"), scored(gt_mask, 0.1, "hit")])]
        assert average_precision(good_second, gts) == pytest.approx(0.5, abs=1e-9)

    def test_spurious_top_prediction_never_helps(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            gt_mask = box_mask(32, 32, 2, 18, 2, 18)
            gts = [aset([scored(gt_mask, 1.0, "g")])]
            preds = [scored(gt_mask, float(rng.uniform(0.2, 0.8)), "p")]
            base = average_precision([aset(preds)], gts)
            junk = scored(box_mask(32, 32, 24, 30, 24, 30), 0.95, "junk")
            worse = average_precision([aset(preds + [junk])], gts)
            assert worse <= base + 1e-12


def exhaustive_lexicographic(ious, thresh):
    """Best injective pred->gt assignment under the documented greedy order.

    Predictions are considered in score order; earlier predictions' IoU takes
    lexicographic precedence, ties preferring the smallest gt index. Matches
    below ``thresh`` are forbidden.
    """
    n_pred, n_gt = ious.shape
    best_key, best_assign = None, None
    gt_ids = list(range(n_gt)) + [None] * n_pred
    for perm in set(itertools.permutations(gt_ids, n_pred)):
        used = [g for g in perm if g is not None]
        if len(used) != len(set(used)):
            continue
        if any(g is not None and ious[i, g] < thresh for i, g in enumerate(perm)):
            continue
        key = tuple(
            (ious[i, g], -g) if g is not None else (-1.0, 0)
            for i, g in enumerate(perm)
        )
        if best_key is None or key > best_key:
            best_key, best_assign = key, perm
    return [(i, g) for i, g in enumerate(best_assign) if g is not None]


class TestGreedyMatcher:
    def test_agrees_with_exhaustive_on_small_instances(self):
        from hiermask.evaluate import _greedy_matches

        rng = np.random.default_rng(2)
        for _ in range(300):
            n_pred = int(rng.integers(1, 6))
            n_gt = int(rng.integers(1, 6))
            ious = np.round(rng.random((n_pred, n_gt)) * rng.integers(1, 5), 2)
            thresh = float(rng.choice([0.3, 0.5, 0.75]))
            got = sorted(_greedy_matches(np.clip(ious, 0, 1), thresh))
            want = sorted(exhaustive_lexicographic(np.clip(ious, 0, 1), thresh))
            assert got == want


class TestPointPrompt:
    def test_exact_prediction_scores_one(self):
        gt_mask = box_mask(32, 32, 4, 12, 4, 12)
        gts = aset([scored(gt_mask, 1.0, "g")])
        preds = aset([scored(gt_mask, 0.9, "p"),
                      scored(box_mask(32, 32, 0, 32, 0, 32), 0.5, "big")])
        max_iou, oracle_iou = point_prompt_eval(preds, gts)
        assert max_iou == 1.0 and oracle_iou == 1.0

    def test_nested_candidates_hand_computed(self):
        gt_mask = box_mask(32, 32, 12, 20, 12, 20)        # 8x8 = 64 px
        inner = box_mask(32, 32, 14, 18, 14, 18)           # 16 px, iou 16/64
        outer = box_mask(32, 32, 8, 24, 8, 24)             # 256 px, iou 64/256
        preds = aset([scored(inner, 0.9, "inner"), scored(outer, 0.8, "outer")])
        gts = aset([scored(gt_mask, 1.0, "g")])
        max_iou, oracle_iou = point_prompt_eval(preds, gts)
        assert max_iou == pytest.approx(16 / 64)
        assert oracle_iou == pytest.approx(16 / 64)  # inner beats outer
        assert oracle_iou >= max_iou

    def test_no_candidate_contributes_zero(self):
        gt_mask = box_mask(32, 32, 0, 8, 0, 8)
        far = box_mask(32, 32, 20, 30, 20, 30)
        max_iou, oracle_iou = point_prompt_eval(
            aset([scored(far, 0.9, "far")]), aset([scored(gt_mask, 1.0, "g")])
        )
        assert max_iou == 0.0 and oracle_iou == 0.0

    def test_top_k_limits_candidates(self):
        gt_mask = box_mask(32, 32, 8, 24, 8, 24)
        good = scored(gt_mask, 0.1, "good")  # lowest score: pushed out at k=1
        big = scored(box_mask(32, 32, 0, 32, 0, 32), 0.9, "big")
        preds = aset([good, big])
        gts = aset([scored(gt_mask, 1.0, "g")])
        _, oracle_k1 = point_prompt_eval(preds, gts, k=1)
        _, oracle_k2 = point_prompt_eval(preds, gts, k=2)
        assert oracle_k1 == pytest.approx(256 / 1024)
        assert oracle_k2 == 1.0

    def test_oracle_at_least_max_fuzz(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            pred_masks = []
            for i in range(int(rng.integers(1, 8))):
                y0, x0 = rng.integers(0, 24, 2)
                y1 = int(rng.integers(y0 + 1, 32))
                x1 = int(rng.integers(x0 + 1, 32))
                pred_masks.append(scored(box_mask(32, 32, int(y0), y1, int(x0), x1),
                                         float(rng.random()), f"p{i}"))
            gt_masks = []
            for i in range(int(rng.integers(1, 4))):
                y0, x0 = rng.integers(0, 24, 2)
                y1 = int(rng.integers(y0 + 1, 32))
                x1 = int(rng.integers(x0 + 1, 32))
                gt_masks.append(scored(box_mask(32, 32, int(y0), y1, int(x0), x1),
                                       1.0, f"g{i}"))
            max_iou, oracle_iou = point_prompt_eval(aset(pred_masks), aset(gt_masks),
                                                    k=int(rng.integers(1, 7)))
            assert oracle_iou >= max_iou


class TestReport:
    def test_perfect_report(self):
        masks = [scored(box_mask(32, 32, 0, 8, 0, 8), 0.9, "a"),
                 scored(box_mask(32, 32, 16, 28, 16, 28), 0.8, "b")]
        report = build_report([aset(masks)], [aset(masks)])
        assert report.ar_1000 == 1.0
        assert report.ap == 1.0
        assert report.max_iou == 1.0
        assert report.oracle_iou == 1.0
        assert report.n_images == 1
        assert len(report.recall_curve) == len(IOU_THRESHOLDS)
        assert "AR@1000" in report.to_table()
        assert '"ap": 1.0' in report.to_json()

    def test_recall_curve_thresholds(self):
        masks = [scored(box_mask(32, 32, 0, 8, 0, 8), 0.9, "a")]
        curve = recall_curve([aset(masks)], [aset(masks)])
        assert set(curve) == set(IOU_THRESHOLDS)
        assert all(v == 1.0 for v in curve.values())
