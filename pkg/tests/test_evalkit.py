"""FROC / AP metric suite against hand computations and brute-force oracles."""
import json

import numpy as np
import pytest

from mp3d.evalkit import (EvalReport, average_precision, evaluate, froc_sensitivity,
                          iou, match_detections)

from oracles import average_precision_direct, froc_direct, match_direct


def _random_instance(rng, n_images=3, n_preds=10, n_gts=4):
    preds, gts = {}, {}
    for i in range(n_images):
        img = f"img{i}"
        preds[img] = []
        gts[img] = []
    for _ in range(n_preds):
        img = f"img{int(rng.integers(n_images))}"
        xy = rng.uniform(0, 60, size=2)
        box = (*xy, *(xy + rng.uniform(5, 30, size=2)))
        preds[img].append((float(np.round(rng.uniform(0, 1), 2)), box))
    for _ in range(n_gts):
        img = f"img{int(rng.integers(n_images))}"
        xy = rng.uniform(0, 60, size=2)
        gts[img].append((*xy, *(xy + rng.uniform(5, 30, size=2))))
    return preds, gts


class TestIoU:
    def test_identity(self):
        assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0

    def test_hand_value(self):
        assert iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(25 / 175)

    def test_degenerate(self):
        assert iou((5, 5, 5, 5), (0, 0, 10, 10)) == 0.0


class TestMatching:
    def test_single_tp(self):
        m = match_detections({"a": [(0.9, (0, 0, 10, 10))]}, {"a": [(0, 0, 10, 10)]})
        assert list(m.is_tp) == [True]

    def test_double_detection(self):
        preds = {"a": [(0.9, (0, 0, 10, 10)), (0.8, (1, 1, 11, 11))]}
        m = match_detections(preds, {"a": [(0, 0, 10, 10)]})
        assert list(m.is_tp) == [True, False]
        assert list(m.scores) == [0.9, 0.8]

    def test_cross_image_isolation(self):
        preds = {"a": [(0.9, (0, 0, 10, 10))]}
        gts = {"a": [], "b": [(0, 0, 10, 10)]}
        m = match_detections(preds, gts)
        assert list(m.is_tp) == [False]
        assert m.num_gts == 1 and m.num_images == 2

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        preds, gts = _random_instance(np.random.default_rng(seed))
        m = match_detections(preds, gts)
        expect = match_direct(preds, gts, 0.5)
        assert [(s, t) for s, t in zip(m.scores, m.is_tp)] \
            == [(s, t) for s, t in expect]


class TestFROC:
    def test_all_tp(self):
        sens = froc_sensitivity([0.9, 0.8], [True, True], num_images=2, num_gts=4)
        assert all(v == 0.5 for v in sens.values())

    def test_empty(self):
        sens = froc_sensitivity([], [], num_images=2, num_gts=3)
        assert all(v == 0.0 for v in sens.values())

    def test_hand_sweep(self):
        scores = [0.9, 0.8, 0.7, 0.6, 0.5]
        flags = [True, False, True, False, False]
        sens = froc_sensitivity(scores, flags, num_images=2, num_gts=3)
        assert sens[0.5] == pytest.approx(2 / 3)
        assert sens[1.0] == pytest.approx(2 / 3)
        assert sens[2.0] == pytest.approx(2 / 3)

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            froc_sensitivity([0.5], [True], num_images=0, num_gts=1)


class TestAP:
    def test_perfect_single(self):
        assert average_precision([0.7], [True], num_gts=1) == 1.0

    def test_hand_value(self):
        ap = average_precision([0.9, 0.8, 0.7], [True, False, True], num_gts=2)
        assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3))

    def test_tied_scores_grouped(self):
        # one TP and one FP at the same score form a single operating point
        ap = average_precision([0.5, 0.5], [True, False], num_gts=1)
        assert ap == pytest.approx(0.5)

    def test_zero_gts_rejected(self):
        with pytest.raises(ValueError):
            average_precision([0.5], [True], num_gts=0)


class TestAgainstOracles:
    @pytest.mark.parametrize("seed", range(15))
    def test_froc_and_ap(self, seed):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(1, 25))
        # coarse scores force plenty of ties
        scored = [(float(np.round(rng.uniform(0, 1), 1)), bool(rng.random() < 0.4))
                  for _ in range(n)]
        scores = [s for s, _ in scored]
        flags = [t for _, t in scored]
        num_images, num_gts = 3, max(sum(flags), 1) + 2
        sens = froc_sensitivity(scores, flags, num_images, num_gts)
        expect = froc_direct(scored, num_images, num_gts, list(sens))
        for rate, v in sens.items():
            assert v == pytest.approx(expect[rate], abs=1e-12)
        assert average_precision(scores, flags, num_gts) \
            == pytest.approx(average_precision_direct(scored, num_gts), abs=1e-12)


class TestInvariances:
    def test_monotone_score_transform(self):
        rng = np.random.default_rng(3)
        scores = rng.uniform(0.1, 1, size=30)
        flags = rng.random(30) < 0.5
        base_s = froc_sensitivity(scores, flags, 4, 10)
        base_ap = average_precision(scores, flags, 10)
        warped = np.exp(3 * scores)
        assert froc_sensitivity(warped, flags, 4, 10) == base_s
        assert average_precision(warped, flags, 10) == pytest.approx(base_ap)

    def test_input_order_invariance(self):
        rng = np.random.default_rng(4)
        scores = np.round(rng.uniform(0, 1, size=20), 1)
        flags = rng.random(20) < 0.5
        perm = rng.permutation(20)
        assert froc_sensitivity(scores[perm], flags[perm], 3, 8) \
            == froc_sensitivity(scores, flags, 3, 8)


class TestEvalReport:
    def test_end_to_end(self):
        preds = {"a": [(0.9, (0, 0, 10, 10)), (0.4, (50, 50, 60, 60))]}
        gts = {"a": [(0, 0, 10, 10)], "b": [(5, 5, 15, 15)]}
        report = evaluate(preds, gts)
        assert report.num_images == 2 and report.num_gts == 2
        assert report.ap_at_05 == pytest.approx(0.5)
        parsed = json.loads(report.to_json())
        assert parsed["num_predictions"] == 2
        lines = report.summary_csv().strip().split("\n")
        assert lines[0].startswith("sens_at_0.5,")

    def test_monotonicity_enforced(self):
        with pytest.raises(ValueError, match="nondecreasing"):
            EvalReport({0.5: 0.9, 1.0: 0.2}, 0.5, 1, 1, 1)

    def test_range_enforced(self):
        with pytest.raises(ValueError, match="outside"):
            EvalReport({0.5: 0.5}, 1.2, 1, 1, 1)

    def test_requires_gt(self):
        with pytest.raises(ValueError, match="ground-truth"):
            evaluate({"a": [(0.5, (0, 0, 5, 5))]}, {"a": []})
