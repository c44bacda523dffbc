import csv
import json

import numpy as np
import pytest

from segdet import evaluation as ev
from segdet.evaluation import Detection
from segdet.geometry import BBox, box_iou


def ap_oracle(detections, gts, class_id, iou_thresh=0.5):
    """Brute-force all-points AP: enumerate ranked prefixes, compute P/R
    directly, and integrate recall steps against the forward precision max."""
    gt_boxes = {img: [b for c, b in items if c == class_id] for img, items in gts.items()}
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        return None
    dets = sorted(
        (d for d in detections if d.class_id == class_id),
        key=lambda d: (-d.score, d.image_id),
    )
    if not dets:
        return 0.0
    used = {img: [False] * len(v) for img, v in gt_boxes.items()}
    points = []  # (recall, precision) per prefix
    tp = 0
    increments = []
    for i, d in enumerate(dets, start=1):
        cands = gt_boxes.get(d.image_id, [])
        ious = [box_iou(d.box, g) for g in cands]
        j = int(np.argmax(ious)) if ious else -1
        matched = False
        if j >= 0 and ious[j] >= iou_thresh and not used[d.image_id][j]:
            used[d.image_id][j] = True
            tp += 1
            matched = True
        points.append((tp / n_gt, tp / i))
        increments.append(matched)
    ap = 0.0
    prev_recall = 0.0
    for i, (r, _) in enumerate(points):
        if increments[i]:
            best_later = max(p for _, p in points[i:])
            ap += (r - prev_recall) * best_later
            prev_recall = r
    return ap


def jittered(box: BBox, rng, amount=3, extent=32) -> BBox:
    dx = int(rng.integers(-amount, amount + 1))
    dy = int(rng.integers(-amount, amount + 1))
    x0 = min(max(box.x0 + dx, 0), extent - 2)
    y0 = min(max(box.y0 + dy, 0), extent - 2)
    x1 = max(min(box.x1 + dx, extent), x0 + 1)
    y1 = max(min(box.y1 + dy, extent), y0 + 1)
    return BBox(x0, y0, x1, y1)


def random_scene(rng, n_images=4, n_classes=3):
    gts = {}
    dets = []
    for img in range(n_images):
        items = []
        for _ in range(int(rng.integers(1, 4))):
            x0 = int(rng.integers(0, 20))
            y0 = int(rng.integers(0, 20))
            box = BBox(x0, y0, x0 + int(rng.integers(6, 12)), y0 + int(rng.integers(6, 12)))
            items.append((int(rng.integers(0, n_classes)), box))
        gts[img] = items
        for c, b in items:
            if rng.random() < 0.8:
                dets.append(Detection(img, jittered(b, rng), c, float(rng.random())))
        for _ in range(int(rng.integers(0, 3))):
            x0 = int(rng.integers(0, 24))
            y0 = int(rng.integers(0, 24))
            fp = BBox(x0, y0, x0 + int(rng.integers(3, 8)), y0 + int(rng.integers(3, 8)))
            dets.append(Detection(img, fp, int(rng.integers(0, n_classes)), float(rng.random())))
    return dets, gts


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = {0: [(0, BBox(2, 2, 12, 12))], 1: [(0, BBox(4, 4, 14, 14))]}
        dets = [
            Detection(0, BBox(2, 2, 12, 12), 0, 0.9),
            Detection(1, BBox(4, 4, 14, 14), 0, 0.8),
            Detection(0, BBox(20, 20, 24, 24), 0, 0.1),
        ]
        assert ev.average_precision(dets, gts, 0) == pytest.approx(1.0)

    def test_all_disjoint_is_zero(self):
        gts = {0: [(0, BBox(0, 0, 8, 8))]}
        dets = [Detection(0, BBox(20, 20, 28, 28), 0, 0.9)]
        assert ev.average_precision(dets, gts, 0) == 0.0

    def test_no_gt_instances_reports_absent(self):
        gts = {0: [(1, BBox(0, 0, 8, 8))]}
        assert ev.average_precision([], gts, 0) is None

    def test_matches_prefix_oracle_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            dets, gts = random_scene(rng)
            for k in range(3):
                got = ev.average_precision(dets, gts, k)
                want = ap_oracle(dets, gts, k)
                if want is None:
                    assert got is None
                else:
                    assert got == pytest.approx(want, abs=1e-9)

    def test_monotone_under_false_positive_removal(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            dets, gts = random_scene(rng)
            base = ev.average_precision(dets, gts, 0)
            if base is None:
                continue
            # find a false positive of class 0: no gt overlap at >= 0.5
            for i, d in enumerate(dets):
                if d.class_id != 0:
                    continue
                gt_boxes = [b for c, b in gts[d.image_id] if c == 0]
                if all(box_iou(d.box, g) < 0.5 for g in gt_boxes):
                    reduced = dets[:i] + dets[i + 1 :]
                    after = ev.average_precision(reduced, gts, 0)
                    assert after >= base - 1e-12
                    break

    def test_11_point_flag(self):
        gts = {0: [(0, BBox(2, 2, 12, 12))]}
        dets = [Detection(0, BBox(2, 2, 12, 12), 0, 0.9)]
        assert ev.average_precision(dets, gts, 0, use_07_metric=True) == pytest.approx(1.0)

    def test_map_excludes_absent_classes(self):
        gts = {0: [(0, BBox(2, 2, 12, 12))]}
        dets = [Detection(0, BBox(2, 2, 12, 12), 0, 0.9)]
        mval, aps = ev.mean_average_precision(dets, gts, n_classes=3)
        assert mval == pytest.approx(1.0)
        assert aps[1] is None and aps[2] is None


class TestCorloc:
    def test_top_box_equals_gt_everywhere(self):
        gts = {i: [(0, BBox(2, 2, 12, 12))] for i in range(3)}
        dets = [Detection(i, BBox(2, 2, 12, 12), 0, 0.9) for i in range(3)]
        assert ev.corloc(dets, gts, 0) == 1.0

    def test_all_disjoint(self):
        gts = {i: [(0, BBox(2, 2, 12, 12))] for i in range(3)}
        dets = [Detection(i, BBox(20, 20, 28, 28), 0, 0.9) for i in range(3)]
        assert ev.corloc(dets, gts, 0) == 0.0

    def test_mixed_four_image_hand_count(self):
        gt_box = BBox(4, 4, 14, 14)
        gts = {i: [(0, gt_box)] for i in range(4)}
        dets = [
            Detection(0, gt_box, 0, 0.9),  # hit
            Detection(1, BBox(5, 5, 14, 14), 0, 0.6),  # IoU 81/100 >= 0.5 hit
            Detection(1, BBox(20, 20, 28, 28), 0, 0.4),  # lower score, ignored
            Detection(2, BBox(20, 20, 28, 28), 0, 0.9),  # miss
            # image 3: no detection of class 0 -> miss
        ]
        assert ev.corloc(dets, gts, 0) == pytest.approx(2 / 4)

    def test_absent_class(self):
        assert ev.corloc([], {0: [(1, BBox(0, 0, 4, 4))]}, 0) is None

    def test_higher_scoring_wrong_box_costs_the_image(self):
        gt_box = BBox(4, 4, 14, 14)
        gts = {0: [(0, gt_box)]}
        dets = [
            Detection(0, BBox(20, 20, 28, 28), 0, 0.9),
            Detection(0, gt_box, 0, 0.5),
        ]
        assert ev.corloc(dets, gts, 0) == 0.0


class TestBoxesToSegmap:
    def test_no_detections_empty_mask(self):
        mask = ev.boxes_to_segmap([], 0, (16, 16), 0.1)
        assert mask.area == 0

    def test_single_box_rasterization(self):
        dets = [Detection(0, BBox(2, 3, 6, 9), 0, 0.7)]
        mask = ev.boxes_to_segmap(dets, 0, (16, 16), 0.5)
        want = np.zeros((16, 16), dtype=bool)
        want[3:9, 2:6] = True
        np.testing.assert_array_equal(mask.bits, want)

    def test_union_and_threshold(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            dets = []
            for _ in range(4):
                x0 = int(rng.integers(0, 10))
                y0 = int(rng.integers(0, 10))
                dets.append(
                    Detection(
                        0,
                        BBox(x0, y0, x0 + int(rng.integers(2, 6)), y0 + int(rng.integers(2, 6))),
                        0,
                        float(rng.random()),
                    )
                )
            mask = ev.boxes_to_segmap(dets, 0, (16, 16), 0.5)
            want = np.zeros((16, 16), dtype=bool)
            for d in dets:
                if d.score >= 0.5:
                    want[d.box.y0 : d.box.y1, d.box.x0 : d.box.x1] = True
            np.testing.assert_array_equal(mask.bits, want)


class TestPixelPrecisionRecall:
    def test_perfect_prediction(self):
        gt = np.zeros((8, 8), dtype=bool)
        gt[2:6, 2:6] = True
        p, r = ev.pixel_precision_recall([gt], [gt])
        assert p == 1.0 and r == 1.0

    def test_half_coverage_full_precision(self):
        gt = np.zeros((8, 8), dtype=bool)
        gt[0:4, 0:4] = True
        pred = np.zeros((8, 8), dtype=bool)
        pred[0:2, 0:4] = True
        p, r = ev.pixel_precision_recall([pred], [gt])
        assert p == 1.0 and r == 0.5

    def test_zero_prediction_precision_absent(self):
        gt = np.ones((4, 4), dtype=bool)
        p, r = ev.pixel_precision_recall([np.zeros((4, 4), dtype=bool)], [gt])
        assert p is None and r == 0.0

    def test_matches_confusion_count_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            pred = rng.random((16, 16)) < 0.4
            gt = rng.random((16, 16)) < 0.4
            p, r = ev.pixel_precision_recall([pred], [gt])
            tp = (pred & gt).sum()
            assert p == pytest.approx(tp / pred.sum() if pred.sum() else None)
            assert r == pytest.approx(tp / gt.sum() if gt.sum() else 0.0)


class TestErrorModes:
    def test_exact_match_is_correct(self):
        assert ev.classify_error_mode(BBox(2, 2, 10, 10), [BBox(2, 2, 10, 10)]) == 0

    def test_small_box_inside_gt(self):
        assert ev.classify_error_mode(BBox(4, 4, 6, 6), [BBox(2, 2, 10, 10)]) == 1

    def test_large_box_containing_gt(self):
        assert ev.classify_error_mode(BBox(0, 0, 20, 20), [BBox(2, 2, 10, 10)]) == 2

    def test_partial_overlap(self):
        assert ev.classify_error_mode(BBox(8, 2, 16, 10), [BBox(2, 2, 10, 10)]) == 3

    def test_no_overlap(self):
        assert ev.classify_error_mode(BBox(20, 20, 28, 28), [BBox(2, 2, 10, 10)]) == 4

    def test_assignment_total_and_exclusive(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            dets, gts = random_scene(rng)
            hist = ev.error_modes(dets, gts, score_thresh=0.0)
            counted = sum(int(v.sum()) for v in hist.per_class.values())
            assert counted == len(dets)
        freqs = hist.pooled_frequencies()
        assert freqs.sum() == pytest.approx(1.0)

    def test_per_class_frequencies_sum_to_one(self):
        rng = np.random.default_rng(5)
        dets, gts = random_scene(rng)
        hist = ev.error_modes(dets, gts, score_thresh=0.0)
        for k in hist.per_class:
            assert hist.frequencies(k).sum() == pytest.approx(1.0)


class TestDetectionsIO:
    def test_jsonl_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        dets, _ = random_scene(rng)
        path = tmp_path / "dets.jsonl"
        ev.write_detections_jsonl(path, dets)
        back = ev.read_detections_jsonl(path)
        assert back == dets


class TestReport:
    def empty_bundle(self, n_classes=3):
        return ev.MetricsBundle(
            n_classes=n_classes,
            map_value=0.0,
            per_class_ap=[None] * n_classes,
            per_class_corloc=[None] * n_classes,
            pixel_precision=None,
            pixel_recall=0.0,
        )

    def test_empty_metrics_produce_valid_files(self, tmp_path):
        paths = ev.report(self.empty_bundle(), tmp_path)
        with open(paths["csv"]) as f:
            rows = list(csv.reader(f))
        assert rows[0][0] == "class"
        assert len(rows) == 1 + 3 + 1  # header + classes + mean
        summary = json.loads(paths["json"].read_text())
        assert summary["map"] == 0.0
        assert paths["svg"].read_text().startswith("<svg")

    def test_json_roundtrip_is_exact(self, tmp_path):
        bundle = self.empty_bundle()
        bundle.map_value = 1 / 3
        bundle.per_class_ap = [0.1, 0.2, None]
        bundle.pixel_recall = 0.7071067811865476
        paths = ev.report(bundle, tmp_path)
        summary = json.loads(paths["json"].read_text())
        assert summary["map"] == bundle.map_value
        assert summary["per_class_ap"] == bundle.per_class_ap
        assert summary["pixel_recall"] == bundle.pixel_recall

    def test_csv_row_count(self, tmp_path):
        bundle = self.empty_bundle(n_classes=5)
        paths = ev.report(bundle, tmp_path)
        with open(paths["csv"]) as f:
            rows = list(csv.reader(f))
        assert len(rows) == 1 + 5 + 1

    def test_report_deterministic(self, tmp_path):
        bundle = self.empty_bundle()
        bundle.modes.per_class[0] = np.array([3.0, 1.0, 0.0, 2.0, 0.0])
        p1 = ev.report(bundle, tmp_path / "a")
        p2 = ev.report(bundle, tmp_path / "b")
        for key in ("csv", "json", "svg"):
            assert p1[key].read_bytes() == p2[key].read_bytes()
