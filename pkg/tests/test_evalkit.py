import json

import numpy as np
import pytest

from bowlkit.errors import ConfigError, FormatError
from bowlkit.evalkit import (
    Detection,
    IOU_THRESHOLDS,
    ar_by_scale,
    ar_novel,
    average_recall,
    evaluate_all,
    load_coco_detections,
    load_coco_ground_truth,
    negative_precision,
    per_threshold_recall,
    recall_at,
    write_report,
)
from bowlkit.geometry import Box, GtBox, iou
from oracles import (
    ar_novel_oracle,
    average_recall_oracle,
    make_star_fixture as _make_star_fixture,
    recall_oracle,
)


def gt(image_id, x, y, w, h, class_id=1, is_base=True):
    return (image_id, GtBox(Box(x, y, w, h), class_id=class_id, is_base=is_base))


def det(image_id, x, y, w, h, score):
    return Detection(image_id, Box(x, y, w, h), score)


def make_star_fixture(rng, max_images=5, max_gts=4):
    return _make_star_fixture(rng, Detection, Box, GtBox, max_images, max_gts)


class TestRecallAt:
    def test_perfect_proposals(self):
        gts = [gt(1, 0, 0, 10, 10), gt(1, 40, 40, 10, 10)]
        dets = [det(1, 0, 0, 10, 10, 0.9), det(1, 40, 40, 10, 10, 0.8)]
        assert recall_at(dets, gts, k=5, iou_threshold=0.5) == 1.0

    def test_zero_detections(self):
        gts = [gt(1, 0, 0, 10, 10)]
        assert recall_at([], gts, k=5, iou_threshold=0.5) == 0.0

    def test_no_ground_truth_is_undefined(self):
        assert recall_at([det(1, 0, 0, 5, 5, 0.5)], [], 5, 0.5) is None

    def test_budget_cuts_low_scores(self):
        gts = [gt(1, 0, 0, 10, 10)]
        dets = [
            det(1, 50, 50, 10, 10, 0.9),  # clutter outranks the hit
            det(1, 0, 0, 10, 10, 0.1),
        ]
        assert recall_at(dets, gts, k=1, iou_threshold=0.5) == 0.0
        assert recall_at(dets, gts, k=2, iou_threshold=0.5) == 1.0

    def test_detection_consumed_once(self):
        gts = [gt(1, 0, 0, 10, 10), gt(1, 0, 0, 10, 10)]
        dets = [det(1, 0, 0, 10, 10, 0.9)]
        assert recall_at(dets, gts, k=5, iou_threshold=0.5) == 0.5

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            dets, base, novel = make_star_fixture(rng)
            gts = base + novel
            if not gts:
                continue
            for k in (1, 3, 100):
                for thr in (0.5, 0.75, 0.95):
                    assert recall_at(dets, gts, k, thr) == recall_oracle(
                        dets, gts, k, thr, iou
                    )

    def test_monotone_in_threshold_and_budget(self):
        rng = np.random.default_rng(32)
        dets, base, novel = make_star_fixture(rng)
        gts = base + novel
        values = [recall_at(dets, gts, 10, t) for t in IOU_THRESHOLDS]
        assert all(a >= b for a, b in zip(values, values[1:]))
        by_k = [recall_at(dets, gts, k, 0.5) for k in (1, 2, 4, 8, 100)]
        assert all(a <= b for a, b in zip(by_k, by_k[1:]))


class TestAverageRecall:
    def test_perfect(self):
        gts = [gt(1, 0, 0, 10, 10)]
        dets = [det(1, 0, 0, 10, 10, 0.9)]
        assert average_recall(dets, gts, k=5) == 1.0

    def test_iou_exactly_point_six(self):
        # det shifted to overlap 75/125 = 0.6 exactly: matched at
        # thresholds 0.50, 0.55, 0.60 only (boundary inclusive).
        gts = [gt(1, 0, 0, 10, 10)]
        dets = [det(1, 0, 2.5, 10, 10, 0.9)]
        assert iou(dets[0].box, gts[0][1].box) == 0.6
        assert average_recall(dets, gts, k=5) == pytest.approx(3 / 10)

    def test_empty_gt_undefined(self):
        assert average_recall([det(1, 0, 0, 5, 5, 0.1)], [], 5) is None

    def test_within_per_threshold_bounds(self):
        rng = np.random.default_rng(33)
        dets, base, novel = make_star_fixture(rng)
        gts = base + novel
        ar = average_recall(dets, gts, 10)
        per = per_threshold_recall(dets, gts, 10)
        assert min(per) <= ar <= max(per)


class TestArNovel:
    def test_all_linked_to_base(self):
        base = [gt(1, 0, 0, 20, 20, is_base=True)]
        novel = [gt(1, 60, 60, 20, 20, class_id=2, is_base=False)]
        dets = [det(1, 0, 0, 20, 20, 0.9)]
        assert ar_novel(dets, base, novel, k=5) == 0.0

    def test_no_base_equals_plain_ar(self):
        novel = [gt(1, 60, 60, 20, 20, class_id=2, is_base=False)]
        dets = [det(1, 60, 60, 20, 20, 0.9), det(1, 0, 0, 10, 10, 0.95)]
        assert ar_novel(dets, [], novel, k=5) == average_recall(dets, novel, k=5)

    def test_budget_relief(self):
        # k=1: the base detection outranks the novel one; removing it
        # frees the budget slot for the novel hit.
        base = [gt(1, 0, 0, 20, 20, is_base=True)]
        novel = [gt(1, 60, 60, 20, 20, class_id=2, is_base=False)]
        dets = [det(1, 0, 0, 20, 20, 0.9), det(1, 60, 60, 20, 20, 0.5)]
        assert average_recall(dets, novel, k=1) == 0.0
        assert ar_novel(dets, base, novel, k=1) == 1.0

    def test_mixed_fixture_hand_enumerated(self):
        # 2 base, 2 novel; 4 detections: one per base (linked away), one
        # perfect novel hit, one clutter. Novel recall = 1/2 at every
        # threshold.
        base = [gt(1, 0, 0, 20, 20), gt(1, 30, 0, 20, 20)]
        novel = [
            gt(1, 60, 60, 20, 20, class_id=2, is_base=False),
            gt(1, 90, 90, 20, 20, class_id=2, is_base=False),
        ]
        dets = [
            det(1, 0, 0, 20, 20, 0.95),
            det(1, 30, 0, 20, 20, 0.90),
            det(1, 60, 60, 20, 20, 0.85),
            det(1, 5, 60, 10, 10, 0.80),
        ]
        assert ar_novel(dets, base, novel, k=4) == pytest.approx(0.5)

    def test_matches_oracle_on_random_fixtures(self):
        rng = np.random.default_rng(34)
        for _ in range(10):
            dets, base, novel = make_star_fixture(rng)
            if not novel:
                continue
            for k in (1, 3, 100):
                assert ar_novel(dets, base, novel, k) == ar_novel_oracle(
                    dets, base, novel, k, IOU_THRESHOLDS, iou
                )

    def test_not_above_full_set_ar_when_budget_unbound(self):
        rng = np.random.default_rng(35)
        for _ in range(10):
            dets, base, novel = make_star_fixture(rng)
            if not novel:
                continue
            k = len(dets) + 1  # non-binding budget
            constrained = ar_novel(dets, base, novel, k)
            free = average_recall(dets, novel, k)
            assert constrained <= free + 1e-12


class TestArByScale:
    def test_small_box_counts_small_only(self):
        gts = [gt(1, 0, 0, 10, 10)]
        dets = [det(1, 0, 0, 10, 10, 0.9)]
        small, medium, large = ar_by_scale(dets, gts, 5)
        assert small == 1.0
        assert medium is None and large is None

    def test_large_box(self):
        gts = [gt(1, 0, 0, 100, 100)]
        dets = [det(1, 0, 0, 100, 100, 0.9)]
        small, medium, large = ar_by_scale(dets, gts, 5)
        assert large == 1.0
        assert small is None and medium is None

    def test_matches_per_partition_oracle(self):
        rng = np.random.default_rng(36)
        dets, base, novel = make_star_fixture(rng)
        gts = base + novel
        small, medium, large = ar_by_scale(dets, gts, 10)
        parts = (
            [g for g in gts if g[1].box.area < 1024],
            [g for g in gts if 1024 <= g[1].box.area < 9216],
            [g for g in gts if g[1].box.area >= 9216],
        )
        for got, part in zip((small, medium, large), parts):
            expected = average_recall_oracle(dets, part, 10, IOU_THRESHOLDS, iou)
            assert got == expected


class TestNegativePrecision:
    def test_all_disjoint(self):
        negs = [(1, Box(0, 0, 10, 10)), (1, Box(50, 50, 10, 10))]
        gts = [gt(1, 100, 100, 20, 20)]
        assert negative_precision(negs, gts) == 1.0

    def test_one_contaminated(self):
        negs = [(1, Box(0, 0, 10, 10)), (1, Box(95, 95, 20, 20))]
        gts = [gt(1, 100, 100, 20, 20)]
        assert iou(negs[1][1], gts[0][1].box) > 0.1
        assert negative_precision(negs, gts) == 0.5

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(37)
        negs = [
            (1, Box(float(rng.integers(0, 80)), float(rng.integers(0, 80)), 15, 15))
            for _ in range(40)
        ]
        gts = [gt(1, 30, 30, 30, 30), gt(1, 70, 10, 25, 25)]
        values = [
            negative_precision(negs, gts, iou_threshold=t)
            for t in (0.05, 0.1, 0.2, 0.4, 0.8)
        ]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_anchor_size_filter(self):
        negs = [(1, Box(0, 0, 128, 128)), (1, Box(200, 200, 64, 64))]
        gts = [gt(1, 210, 210, 30, 30)]
        assert negative_precision(negs, gts, anchor_size=128) == 1.0
        assert negative_precision(negs, gts, anchor_size=64) == 0.0

    def test_no_negatives_undefined(self):
        assert negative_precision([], [gt(1, 0, 0, 5, 5)]) is None


class TestCocoIO:
    def test_ground_truth_round_trip(self, tmp_path):
        payload = {
            "images": [{"id": 1, "width": 192, "height": 192}],
            "annotations": [
                {"id": 1, "image_id": 1, "bbox": [0, 0, 32, 32], "category_id": 1},
                {"id": 2, "image_id": 1, "bbox": [64, 64, 32, 32], "category_id": 2},
            ],
            "categories": [
                {"id": 1, "name": "thing", "split": "base"},
                {"id": 2, "name": "other", "split": "novel"},
            ],
        }
        path = tmp_path / "ann.json"
        path.write_text(json.dumps(payload))
        images, gts = load_coco_ground_truth(path)
        assert images == {1: (192, 192)}
        assert len(gts) == 2
        assert gts[0][1].is_base and not gts[1][1].is_base

    def test_detections_round_trip(self, tmp_path):
        payload = [{"image_id": 3, "bbox": [1, 2, 3, 4], "score": 0.25}]
        path = tmp_path / "dets.json"
        path.write_text(json.dumps(payload))
        (d,) = load_coco_detections(path)
        assert d.image_id == 3 and d.score == 0.25

    def test_malformed_ground_truth(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("[1, 2, 3]")
        with pytest.raises(FormatError):
            load_coco_ground_truth(path)

    def test_report_writer(self, tmp_path):
        gts = [gt(1, 0, 0, 10, 10), gt(1, 40, 40, 60, 60, class_id=2, is_base=False)]
        dets = [det(1, 0, 0, 10, 10, 0.9), det(1, 40, 40, 60, 60, 0.8)]
        report = evaluate_all(dets, gts, k=10)
        write_report(report, tmp_path / "r.txt", tmp_path / "r.json")
        text = (tmp_path / "r.txt").read_text()
        assert "ar_all\t1.000000" in text
        loaded = json.loads((tmp_path / "r.json").read_text())
        assert loaded["budget_k"] == 10
        assert loaded["ar_all"] == 1.0

    def test_budget_validated(self):
        with pytest.raises(ConfigError):
            recall_at([], [gt(1, 0, 0, 5, 5)], k=0, iou_threshold=0.5)
