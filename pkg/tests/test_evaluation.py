"""Tests for the evaluation protocols and report writers."""

import json
import math

import numpy as np
import pytest

from oracles import average_precision_bruteforce
from temdet.boxes import BBox, Detection
from temdet.evaluation import (
    EvalRecord,
    MapResult,
    average_precision,
    bbox2d_metric,
    map_protocol,
    match_predictions,
    per_object_report,
    precision_recall_points,
    read_gt_manifest,
    records_from_predictions,
    write_gt_manifest,
    write_report,
)

# Published per-object AP tables used as aggregation oracles.
SINGLE_OBJECT_APS = [
    89.16, 71.50, 94.00, 46.88, 92.47, 80.75, 82.74, 77.19,
    63.31, 96.89, 89.51, 67.83, 87.67, 86.39, 42.48,
]
CLUTTER_APS = [36.58, 55.92, 73.49, 29.18, 55.20, 77.48, 52.79, 16.26, 59.52]


def det(box, score, object_id="obj", template_index=0):
    return Detection(bbox=BBox(*box), score=score,
                     template_index=template_index, object_id=object_id)


class TestReportAggregation:
    def test_fifteen_object_mean(self):
        table = per_object_report(
            {f"o{i:02d}": v for i, v in enumerate(SINGLE_OBJECT_APS)}
        )
        assert abs(table.mean - 77.92) < 0.005

    def test_nine_object_mean(self):
        table = per_object_report(
            {f"o{i}": v for i, v in enumerate(CLUTTER_APS)}
        )
        assert abs(table.mean - 50.71) < 0.005

    def test_rows_preserved_in_order(self):
        table = per_object_report([("b", 2.0), ("a", 4.0)])
        assert table.rows == [("b", 2.0), ("a", 4.0)]
        assert table.mean == 3.0

    def test_text_has_mean_row_and_fixed_width(self):
        table = per_object_report({"ape": 50.0, "can": 70.0}, metric="AP")
        lines = table.text.splitlines()
        assert lines[0].startswith("object")
        assert lines[-1].startswith("mean")
        assert "60.00" in lines[-1]
        assert len({len(l) for l in lines}) == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            per_object_report({})

    def test_to_dict(self):
        table = per_object_report({"ape": 50.0}, metric="bbox2d")
        d = table.to_dict()
        assert d == {"metric": "bbox2d", "per_object": {"ape": 50.0},
                     "mean": 50.0}


class TestBbox2dMetric:
    def test_all_hits(self):
        records = [
            EvalRecord("im0", "obj", det((0, 0, 10, 10), 0.9),
                       [BBox(0, 0, 10, 10)]),
            EvalRecord("im1", "obj", det((5, 5, 20, 20), 0.8),
                       [BBox(5, 5, 21, 20)]),
        ]
        assert bbox2d_metric(records) == 100.0

    def test_three_of_four(self):
        hit = det((0, 0, 10, 10), 0.9)
        records = [
            EvalRecord("im0", "obj", hit, [BBox(0, 0, 10, 10)]),
            EvalRecord("im1", "obj", hit, [BBox(0, 0, 10, 10)]),
            EvalRecord("im2", "obj", hit, [BBox(0, 0, 10, 10)]),
            EvalRecord("im3", "obj", det((50, 50, 60, 60), 0.9),
                       [BBox(0, 0, 10, 10)]),
        ]
        assert bbox2d_metric(records) == 75.0

    def test_missing_prediction_is_a_miss(self):
        records = [EvalRecord("im0", "obj", None, [BBox(0, 0, 10, 10)])]
        assert bbox2d_metric(records) == 0.0

    def test_iou_exactly_half_is_a_miss(self):
        # [0,0,10,20] vs [0,0,10,10]: inter 100, union 200
        records = [EvalRecord("im0", "obj", det((0, 0, 10, 20), 0.9),
                              [BBox(0, 0, 10, 10)])]
        assert bbox2d_metric(records) == 0.0
        # shrinking to height 19 pushes IoU to 100/190 > 0.5
        records[0].prediction = det((0, 0, 10, 19), 0.9)
        assert bbox2d_metric(records) == 100.0

    def test_best_gt_box_counts(self):
        records = [EvalRecord("im0", "obj", det((0, 0, 10, 10), 0.9),
                              [BBox(90, 90, 99, 99), BBox(0, 0, 10, 11)])]
        assert bbox2d_metric(records) == 100.0

    def test_empty_records(self):
        assert bbox2d_metric([]) == 0.0


class TestAveragePrecision:
    def test_perfect_single(self):
        preds = [("im0", det((0, 0, 10, 10), 0.9))]
        gts = {"im0": [BBox(0, 0, 10, 10)]}
        assert average_precision(preds, gts) == 1.0

    def test_tp_above_fp_scores_one(self):
        preds = [
            ("im0", det((0, 0, 10, 10), 0.9)),
            ("im0", det((50, 50, 60, 60), 0.8)),
        ]
        gts = {"im0": [BBox(0, 0, 10, 10)]}
        assert average_precision(preds, gts) == 1.0

    def test_fp_above_tp_scores_half(self):
        preds = [
            ("im0", det((50, 50, 60, 60), 0.9)),
            ("im0", det((0, 0, 10, 10), 0.8)),
        ]
        gts = {"im0": [BBox(0, 0, 10, 10)]}
        assert average_precision(preds, gts) == 0.5

    def test_no_ground_truth(self):
        preds = [("im0", det((0, 0, 10, 10), 0.9))]
        assert average_precision(preds, {"im0": []}) == 0.0

    def test_no_predictions(self):
        assert average_precision([], {"im0": [BBox(0, 0, 10, 10)]}) == 0.0

    def test_each_gt_matched_once(self):
        # two identical predictions, one gt: second must be a false positive
        preds = [
            ("im0", det((0, 0, 10, 10), 0.9)),
            ("im0", det((0, 0, 10, 10), 0.8)),
        ]
        gts = {"im0": [BBox(0, 0, 10, 10)]}
        matches = match_predictions(preds, gts)
        assert [tp for _, tp in matches] == [True, False]

    def test_matching_prefers_highest_iou(self):
        preds = [("im0", det((0, 0, 10, 10), 0.9))]
        gts = {"im0": [BBox(0, 0, 10, 14), BBox(0, 0, 10, 11)]}
        matches = match_predictions(preds, gts)
        assert matches == [(0.9, True)]
        # the tighter gt was consumed, so an equal later pred misses it
        preds.append(("im0", det((0, 0, 10, 11), 0.8)))
        matches = match_predictions(preds, gts)
        assert [tp for _, tp in matches] == [True, True]

    def test_matching_respects_image_boundaries(self):
        preds = [("im1", det((0, 0, 10, 10), 0.9))]
        gts = {"im0": [BBox(0, 0, 10, 10)], "im1": []}
        assert average_precision(preds, gts) == 0.0

    def test_score_ties_grouped(self):
        # one TP and one FP at the same score form a single PR point
        preds = [
            ("im0", det((0, 0, 10, 10), 0.5)),
            ("im0", det((50, 50, 60, 60), 0.5)),
        ]
        gts = {"im0": [BBox(0, 0, 10, 10)]}
        points = precision_recall_points(preds, gts)
        assert points == [(0.5, 1.0, 0.5)]
        assert average_precision(preds, gts) == 0.5

    def test_monotone_score_transform_invariant(self):
        rng = np.random.default_rng(3)
        preds = []
        for i in range(12):
            x, y = rng.uniform(0, 80, size=2)
            preds.append(("im0", det((x, y, x + 15, y + 15),
                                     round(rng.uniform(0.1, 0.9), 2))))
        gts = {"im0": [BBox(10, 10, 26, 26), BBox(60, 40, 74, 56)]}
        base = average_precision(preds, gts)
        squashed = [
            (img, det((d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max),
                      0.25 + d.score / 2))
            for img, d in preds
        ]
        assert average_precision(squashed, gts) == pytest.approx(base, abs=1e-12)

    def test_eleven_point_differs_on_coarse_recall(self):
        # one TP out of three gts: all-points gives 1/3, the 11-point grid
        # credits max precision 1.0 at t in {0, .1, .2, .3}
        preds = [("im0", det((0, 0, 10, 10), 0.9))]
        gts = {"im0": [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30),
                       BBox(40, 40, 50, 50)]}
        assert average_precision(preds, gts) == pytest.approx(1 / 3)
        assert average_precision(preds, gts, eleven_point=True) == pytest.approx(4 / 11)

    def test_eleven_point_perfect(self):
        preds = [("im0", det((0, 0, 10, 10), 0.9))]
        gts = {"im0": [BBox(0, 0, 10, 10)]}
        assert average_precision(preds, gts, eleven_point=True) == 1.0

    def test_range(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            preds, gts = _random_instance(rng)
            ap = average_precision(preds, gts)
            assert 0.0 <= ap <= 1.0

    def test_agrees_with_bruteforce(self):
        rng = np.random.default_rng(29)
        for _ in range(60):
            preds, gts = _random_instance(rng)
            got = average_precision(preds, gts)
            want = average_precision_bruteforce(
                [(img, (d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max),
                  d.score) for img, d in preds],
                {img: [(b.x_min, b.y_min, b.x_max, b.y_max) for b in boxes]
                 for img, boxes in gts.items()},
            )
            assert got == pytest.approx(want, abs=1e-12)


def _random_instance(rng, max_preds=20):
    images = [f"im{i}" for i in range(rng.integers(1, 4))]
    gts = {}
    for img in images:
        boxes = []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.uniform(0, 70, size=2)
            w, h = rng.uniform(5, 30, size=2)
            boxes.append(BBox(x, y, x + w, y + h))
        gts[img] = boxes
    preds = []
    for _ in range(rng.integers(1, max_preds + 1)):
        img = images[rng.integers(len(images))]
        if gts[img] and rng.uniform() < 0.6:
            g = gts[img][rng.integers(len(gts[img]))]
            dx, dy = rng.uniform(-6, 6, size=2)
            box = (g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy)
        else:
            x, y = rng.uniform(0, 70, size=2)
            box = (x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30))
        # coarse scores force ties through the grouped-threshold path
        preds.append((img, det(box, round(rng.uniform(0.05, 0.95), 1))))
    return preds, gts


class TestMapProtocol:
    def test_perfect_two_objects(self):
        preds = [
            ("im0", det((0, 0, 10, 10), 0.9, "ape")),
            ("im1", det((20, 20, 40, 40), 0.8, "can")),
        ]
        gt = {
            "im0": {"ape": [BBox(0, 0, 10, 10)]},
            "im1": {"can": [BBox(20, 20, 40, 40)]},
        }
        result = map_protocol(preds, gt, ["ape", "can"])
        assert result.per_object == {"ape": 100.0, "can": 100.0}
        assert result.mean == 100.0

    def test_absent_object_pollutes_pooled_nms(self):
        gt = {"im0": {"ape": [BBox(0, 0, 10, 10)]}}
        ape = ("im0", det((0, 0, 10, 10), 0.6, "ape"))
        ghost = ("im0", det((0, 0, 10, 11), 0.9, "duck"))

        clean = map_protocol([ape], gt, ["ape"], known_objects=["duck"])
        assert clean.per_object == {"ape": 100.0}

        polluted = map_protocol([ape, ghost], gt, ["ape"],
                                known_objects=["duck"])
        assert polluted.per_object == {"ape": 0.0}
        assert "duck" not in polluted.per_object
        assert polluted.mean == 0.0

    def test_nms_pools_within_image_only(self):
        # same box in two images: no cross-image suppression
        gt = {
            "im0": {"ape": [BBox(0, 0, 10, 10)]},
            "im1": {"ape": [BBox(0, 0, 10, 10)]},
        }
        preds = [
            ("im0", det((0, 0, 10, 10), 0.9, "ape")),
            ("im1", det((0, 0, 10, 10), 0.4, "ape")),
        ]
        result = map_protocol(preds, gt, ["ape"])
        assert result.per_object == {"ape": 100.0}

    def test_nms_threshold_is_strict(self):
        # IoU exactly at the threshold survives, so both boxes stay and the
        # lower-scored one becomes a false positive after the gt is used
        gt = {"im0": {"ape": [BBox(0, 0, 10, 10)]}}
        preds = [
            ("im0", det((0, 0, 10, 10), 0.9, "ape")),
            ("im0", det((0, 0, 10, 20), 0.8, "ape")),
        ]
        result = map_protocol(preds, gt, ["ape"], nms_iou=0.5)
        assert result.per_object == {"ape": 100.0}
        tighter = map_protocol(preds, gt, ["ape"], nms_iou=0.45)
        assert tighter.per_object == {"ape": 100.0}

    def test_unknown_object_rejected(self):
        gt = {"im0": {"ape": [BBox(0, 0, 10, 10)]}}
        preds = [("im0", det((0, 0, 10, 10), 0.9, "mug"))]
        with pytest.raises(ValueError, match="mug"):
            map_protocol(preds, gt, ["ape"])

    def test_object_without_predictions_scores_zero(self):
        gt = {
            "im0": {"ape": [BBox(0, 0, 10, 10)],
                    "can": [BBox(30, 30, 40, 40)]},
        }
        preds = [("im0", det((0, 0, 10, 10), 0.9, "ape"))]
        result = map_protocol(preds, gt, ["ape", "can"])
        assert result.per_object == {"ape": 100.0, "can": 0.0}
        assert result.mean == 50.0

    def test_mean_is_average(self):
        with pytest.raises(ValueError):
            MapResult(per_object={"a": 10.0, "b": 30.0}, mean=25.0)
        ok = MapResult(per_object={"a": 10.0, "b": 30.0}, mean=20.0)
        assert ok.mean == 20.0


class TestRecordsFromPredictions:
    def test_top_prediction_per_image(self):
        gt = {"im0": {"ape": [BBox(0, 0, 10, 10)]}}
        preds = [
            ("im0", det((0, 0, 10, 10), 0.4, "ape", template_index=3)),
            ("im0", det((50, 50, 60, 60), 0.9, "ape", template_index=7)),
        ]
        records = records_from_predictions(preds, gt, "ape")
        assert len(records) == 1
        assert records[0].prediction.score == 0.9
        assert records[0].gt_boxes == [BBox(0, 0, 10, 10)]

    def test_score_tie_takes_lower_template_index(self):
        gt = {"im0": {"ape": [BBox(0, 0, 10, 10)]}}
        preds = [
            ("im0", det((0, 0, 10, 10), 0.9, "ape", template_index=5)),
            ("im0", det((1, 1, 11, 11), 0.9, "ape", template_index=2)),
        ]
        records = records_from_predictions(preds, gt, "ape")
        assert records[0].prediction.template_index == 2

    def test_images_without_the_object_are_skipped(self):
        gt = {
            "im0": {"ape": [BBox(0, 0, 10, 10)]},
            "im1": {"can": [BBox(0, 0, 10, 10)]},
        }
        records = records_from_predictions([], gt, "ape")
        assert [r.image_id for r in records] == ["im0"]
        assert records[0].prediction is None

    def test_other_objects_ignored(self):
        gt = {"im0": {"ape": [BBox(0, 0, 10, 10)]}}
        preds = [("im0", det((0, 0, 10, 10), 0.9, "can"))]
        records = records_from_predictions(preds, gt, "ape")
        assert records[0].prediction is None


class TestManifestAndReportIO:
    def test_gt_manifest_round_trip(self, tmp_path):
        gt = {
            "im0": {"ape": [BBox(0.5, 1.25, 10.0, 20.125)],
                    "can": [BBox(3, 4, 5, 6), BBox(7, 8, 9, 10)]},
            "im1": {"ape": []},
        }
        path = tmp_path / "gt.json"
        write_gt_manifest(path, gt)
        assert read_gt_manifest(path) == gt

    def test_write_report_files(self, tmp_path):
        tables = [
            per_object_report({"ape": 80.0, "can": 60.0}, metric="AP"),
            per_object_report({"ape": 90.0}, metric="bbox2d"),
        ]
        curves = {"ape": [(0.9, 0.5, 1.0), (0.4, 1.0, 0.66)]}
        write_report(tmp_path / "report", tables, curves)

        text = (tmp_path / "report" / "report.txt").read_text()
        assert "mean" in text and "70.00" in text

        results = json.loads((tmp_path / "report" / "results.json").read_text())
        assert results[0]["mean"] == 70.0
        assert results[1]["metric"] == "bbox2d"

        csv_lines = (tmp_path / "report" / "pr_ape.csv").read_text().splitlines()
        assert csv_lines[0] == "score,recall,precision"
        assert len(csv_lines) == 3
