import numpy as np
import pytest

from bevfuse.heads import render_targets
from bevfuse.metrics import (
    Detection,
    alignment_error,
    decode_detections,
    evaluate,
)
from bevfuse.scene import TruthBox


def box(class_id=0, row=5.0, col=5.0, w=2.0, l=2.0, vr=0.0, vc=0.0):
    return TruthBox(class_id=class_id, row=row, col=col, w=w, l=l, vr=vr, vc=vc)


def det(class_id=0, row=5.0, col=5.0, score=0.9, vr=0.0, vc=0.0):
    return Detection(row=row, col=col, w=2.0, l=2.0, vr=vr, vc=vc, class_id=class_id, score=score)


class TestDecode:
    def test_single_peak(self):
        q = np.zeros((8, 8, 2))
        q[3, 4, 1] = 0.8
        r = np.zeros((8, 8, 6))
        r[3, 4] = [0.25, -0.25, 2.0, 3.0, 0.5, -0.5]
        dets = decode_detections(q, r)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 1
        assert d.score == pytest.approx(0.8)
        assert (d.row, d.col) == pytest.approx((3.25, 3.75))
        assert (d.w, d.l, d.vr, d.vc) == pytest.approx((2.0, 3.0, 0.5, -0.5))

    def test_non_maximum_suppressed(self):
        # a cell adjacent to a larger one is not a peak
        q = np.zeros((8, 8, 1))
        q[3, 3, 0] = 0.9
        q[3, 4, 0] = 0.8
        dets = decode_detections(q, np.zeros((8, 8, 6)))
        assert len(dets) == 1
        assert dets[0].row == 3 and dets[0].col == 3

    def test_score_threshold(self):
        q = np.zeros((8, 8, 1))
        q[2, 2, 0] = 0.05
        assert decode_detections(q, np.zeros((8, 8, 6)), score_thresh=0.1) == []
        assert len(decode_detections(q, np.zeros((8, 8, 6)), score_thresh=0.01)) == 1

    def test_max_dets_keeps_highest(self):
        q = np.zeros((8, 8, 1))
        q[1, 1, 0] = 0.5
        q[5, 5, 0] = 0.9
        q[7, 1, 0] = 0.7
        dets = decode_detections(q, np.zeros((8, 8, 6)), max_dets=2)
        assert [d.score for d in dets] == [0.9, 0.7]

    def test_equal_scores_tie_break_row_col(self):
        q = np.zeros((8, 8, 1))
        q[6, 2, 0] = 0.5
        q[1, 5, 0] = 0.5
        dets = decode_detections(q, np.zeros((8, 8, 6)), max_dets=1)
        assert (dets[0].row, dets[0].col) == (1, 5)

    def test_classes_independent(self):
        # peaks are per channel; a larger value in another class does
        # not suppress
        q = np.zeros((8, 8, 2))
        q[3, 3, 0] = 0.4
        q[3, 3, 1] = 0.9
        dets = decode_detections(q, np.zeros((8, 8, 6)))
        assert sorted(d.class_id for d in dets) == [0, 1]

    def test_border_peak(self):
        q = np.zeros((8, 8, 1))
        q[0, 0, 0] = 0.6
        dets = decode_detections(q, np.zeros((8, 8, 6)))
        assert len(dets) == 1

    def test_roundtrip_with_rendered_targets(self):
        # decoding the rendered targets recovers every center exactly:
        # the heatmap peak sits on the rounded cell and the regression
        # map stores the exact sub-cell remainder
        gts = [
            box(class_id=0, row=4.3, col=9.6, w=2.0, l=3.0, vr=0.4, vc=-0.2),
            box(class_id=1, row=12.5, col=3.1, w=4.0, l=2.0, vr=0.0, vc=1.0),
            box(class_id=2, row=8.0, col=14.8, w=1.0, l=1.0, vr=-0.3, vc=0.0),
        ]
        maps = render_targets(gts, 20, 20, num_classes=3)
        dets = decode_detections(maps.heat, maps.reg, score_thresh=0.99)
        assert len(dets) == 3
        by_class = {d.class_id: d for d in dets}
        for gt in gts:
            d = by_class[gt.class_id]
            assert abs(d.row - gt.row) < 1e-12
            assert abs(d.col - gt.col) < 1e-12
            assert (d.w, d.l) == pytest.approx((gt.w, gt.l), abs=1e-12)
            assert (d.vr, d.vc) == pytest.approx((gt.vr, gt.vc), abs=1e-12)


class TestEvaluate:
    def test_perfect_detection(self):
        gts = [[box(row=5, col=5)]]
        dets = [[det(row=5, col=5, score=0.9)]]
        m = evaluate(dets, gts)
        assert m.mean_ap == pytest.approx(1.0)
        assert all(v == pytest.approx(1.0) for v in m.ap.values())
        assert m.velocity_error == pytest.approx(0.0)

    def test_high_score_false_positive_halves_ap(self):
        # one true positive plus one higher-scored false positive on a
        # single truth: precision is 0 then 1/2, recall reaches 1, and
        # every interpolation level reads 1/2
        gts = [[box(row=5, col=5)]]
        dets = [[det(row=5, col=5, score=0.6), det(row=20, col=20, score=0.9)]]
        m = evaluate(dets, gts, thresholds=(2.0,))
        assert m.ap[(0, 2.0)] == pytest.approx(0.5)

    def test_missed_truth_caps_recall(self):
        # 1 of 2 truths found, no false positives: precision stays 1 up
        # to recall 0.5, so 6 of 11 levels contribute
        gts = [[box(row=5, col=5), box(row=20, col=20)]]
        dets = [[det(row=5, col=5, score=0.9)]]
        m = evaluate(dets, gts, thresholds=(2.0,))
        assert m.ap[(0, 2.0)] == pytest.approx(6.0 / 11.0)

    def test_truth_matched_once(self):
        gts = [[box(row=5, col=5)]]
        dets = [[det(row=5, col=5, score=0.9), det(row=5.5, col=5, score=0.8)]]
        m = evaluate(dets, gts, thresholds=(2.0,))
        assert m.ap[(0, 2.0)] == pytest.approx(1.0)  # FP after full recall changes nothing

    def test_higher_score_matches_first(self):
        # the lower-scored prediction is closer, but greedy order gives
        # the truth to the higher score
        gts = [[box(row=5, col=5, vr=1.0)]]
        dets = [[det(row=5.8, col=5, score=0.9, vr=0.0), det(row=5.1, col=5, score=0.5, vr=1.0)]]
        m = evaluate(dets, gts, thresholds=(2.0,))
        assert m.ap[(0, 2.0)] == pytest.approx(1.0)
        assert m.velocity_error == pytest.approx(1.0)

    def test_nearest_unmatched_truth_wins(self):
        gts = [[box(row=5, col=5), box(row=5, col=8)]]
        dets = [[det(row=5, col=6, score=0.9), det(row=5, col=5, score=0.8)]]
        m = evaluate(dets, gts, thresholds=(4.0,))
        # first pred takes col 5 (distance 1 vs 2), second matches... col 5 is
        # taken, and col 8 is 3 cells away, still within 4
        assert m.ap[(0, 4.0)] == pytest.approx(1.0)

    def test_distance_thresholds_gate_matching(self):
        gts = [[box(row=5, col=5)]]
        dets = [[det(row=5, col=6.5, score=0.9)]]
        m = evaluate(dets, gts)
        assert m.ap[(0, 1.0)] == pytest.approx(0.0)
        assert m.ap[(0, 2.0)] == pytest.approx(1.0)
        assert m.ap[(0, 4.0)] == pytest.approx(1.0)
        assert m.mean_ap == pytest.approx(2.0 / 3.0)

    def test_class_mismatch_is_false_positive(self):
        gts = [[box(class_id=0, row=5, col=5)]]
        dets = [[det(class_id=1, row=5, col=5, score=0.9)]]
        m = evaluate(dets, gts, thresholds=(2.0,))
        # class 1 has no truth so it is skipped; class 0 has no preds
        assert m.ap == {(0, 2.0): 0.0}
        assert m.mean_ap == pytest.approx(0.0)

    def test_matching_stays_within_frame(self):
        gts = [[box(row=5, col=5)], []]
        dets = [[], [det(row=5, col=5, score=0.9)]]
        m = evaluate(dets, gts, thresholds=(2.0,))
        assert m.ap[(0, 2.0)] == pytest.approx(0.0)

    def test_velocity_error_over_true_positives(self):
        gts = [[box(row=5, col=5, vr=1.0, vc=0.0), box(row=10, col=10, vr=0.0, vc=0.0)]]
        dets = [
            [
                det(row=5, col=5, score=0.9, vr=1.0, vc=1.0),  # error 1
                det(row=10, col=10, score=0.8, vr=0.0, vc=3.0),  # error 3
                det(row=20, col=3, score=0.7, vr=9.0, vc=9.0),  # FP, ignored
            ]
        ]
        m = evaluate(dets, gts, thresholds=(1.0, 2.0, 4.0))
        assert m.velocity_error == pytest.approx(2.0)

    def test_no_true_positives_velocity_nan(self):
        m = evaluate([[det(row=0, col=0, score=0.5)]], [[box(row=9, col=9)]])
        assert np.isnan(m.velocity_error)

    def test_mean_over_classes_and_thresholds(self):
        gts = [[box(class_id=0, row=5, col=5), box(class_id=1, row=10, col=10)]]
        dets = [[det(class_id=0, row=5, col=5, score=0.9)]]  # class 1 missed
        m = evaluate(dets, gts)
        assert len(m.ap) == 6
        assert m.mean_ap == pytest.approx(0.5)

    def test_counts(self):
        gts = [[box()], [box(), box(row=9, col=9)]]
        dets = [[det()], []]
        m = evaluate(dets, gts)
        assert m.num_gt == 3
        assert m.num_pred == 1

    def test_frame_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            evaluate([[]], [[], []])

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        gts = [[box(row=float(rng.uniform(0, 20)), col=float(rng.uniform(0, 20))) for _ in range(4)] for _ in range(3)]
        dets = [
            [det(row=float(rng.uniform(0, 20)), col=float(rng.uniform(0, 20)), score=float(rng.uniform(0, 1))) for _ in range(5)]
            for _ in range(3)
        ]
        a = evaluate(dets, gts)
        b = evaluate(dets, gts)
        assert a.ap == b.ap
        assert a.mean_ap == b.mean_ap


class TestAlignmentError:
    def test_zero_for_equal(self):
        q = np.random.default_rng(0).normal(size=(4, 4, 2))
        assert alignment_error(q, q.copy()) == 0.0

    def test_mean_absolute_gap(self):
        q = np.zeros((2, 2, 1))
        p = np.full((2, 2, 1), 0.5)
        assert alignment_error(q, p) == pytest.approx(0.5)
        p[0, 0, 0] = -0.5
        assert alignment_error(q, p) == pytest.approx(0.5)
