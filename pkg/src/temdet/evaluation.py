"""Evaluation protocols: single-box recall, pooled-NMS mAP, report tables.

Two conventions live here:

* ``bbox2d_metric`` scores one prediction per image against ground truth at
  IoU strictly above 0.5 and reports the hit ratio in percent.
* ``map_protocol`` pools predictions of every object per image, applies
  cross-object NMS, computes per-object average precision, and averages over
  the evaluable object set only. Objects absent from every image still
  pollute the pooled NMS stage with their false positives, which is the
  point of the protocol.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from temdet.boxes import BBox, Detection, iou, nms


@dataclass
class EvalRecord:
    """One image's outcome for one target object."""

    image_id: str
    object_id: str
    prediction: Detection | None
    gt_boxes: list[BBox] = field(default_factory=list)


def bbox2d_metric(records: Sequence[EvalRecord], iou_threshold: float = 0.5) -> float:
    """Percent of records whose prediction overlaps ground truth with
    IoU > threshold (strict, per the protocol)."""
    if not records:
        return 0.0
    hits = 0
    for rec in records:
        if rec.prediction is None or not rec.gt_boxes:
            continue
        best = max(iou(rec.prediction.bbox, g) for g in rec.gt_boxes)
        if best > iou_threshold:
            hits += 1
    return 100.0 * hits / len(records)


def match_predictions(preds: Sequence[tuple[str, Detection]],
                      gts: Mapping[str, Sequence[BBox]],
                      iou_threshold: float = 0.5) -> list[tuple[float, bool]]:
    """Rank predictions by score and greedily match each to the unmatched
    ground-truth box it overlaps most (IoU >= threshold). Returns
    (score, is_true_positive) in rank order; score ties keep input order."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1].score, i))
    used = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    out = []
    for i in order:
        image_id, det = preds[i]
        boxes = gts.get(image_id, [])
        best_g, best_iou = -1, iou_threshold
        for g, gt_box in enumerate(boxes):
            if used[image_id][g]:
                continue
            v = iou(det.bbox, gt_box)
            if v >= best_iou:
                best_g, best_iou = g, v
        if best_g >= 0:
            used[image_id][best_g] = True
            out.append((det.score, True))
        else:
            out.append((det.score, False))
    return out


def _pr_points(matches: Sequence[tuple[float, bool]], n_gt: int):
    """(recall, precision, score) at every distinct-score boundary, so tied
    scores enter or leave the operating point together."""
    points = []
    tp = 0
    seen = 0
    for idx, (score, is_tp) in enumerate(matches):
        tp += is_tp
        seen += 1
        last_of_group = idx + 1 == len(matches) or matches[idx + 1][0] != score
        if last_of_group:
            points.append((tp / n_gt, tp / seen, score))
    return points


def average_precision(preds: Sequence[tuple[str, Detection]],
                      gts: Mapping[str, Sequence[BBox]],
                      iou_threshold: float = 0.5,
                      eleven_point: bool = False) -> float:
    """AP in [0, 1] under the all-points convention (or 11-point if asked)."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0 or not preds:
        return 0.0
    matches = match_predictions(preds, gts, iou_threshold)
    points = _pr_points(matches, n_gt)
    recalls = np.array([r for r, _, _ in points])
    precisions = np.array([p for _, p, _ in points])
    if eleven_point:
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recalls >= t - 1e-12
            total += precisions[mask].max() if mask.any() else 0.0
        return total / 11.0
    # precision envelope integrated over recall
    order = np.argsort(recalls, kind="stable")
    recalls, precisions = recalls[order], precisions[order]
    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    prev = 0.0
    ap = 0.0
    for r, p in zip(recalls, envelope):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return float(ap)


def precision_recall_points(preds, gts, iou_threshold: float = 0.5):
    """(score, recall, precision) rows for CSV export."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0 or not preds:
        return []
    matches = match_predictions(preds, gts, iou_threshold)
    return [(score, r, p) for r, p, score in _pr_points(matches, n_gt)]


@dataclass
class MapResult:
    per_object: dict[str, float]  # AP x 100 per evaluable object
    mean: float  # percent

    def __post_init__(self):
        if self.per_object:
            expected = sum(self.per_object.values()) / len(self.per_object)
            if abs(expected - self.mean) > 1e-9:
                raise ValueError("mean does not match per-object values")


def pooled_nms(predictions: Sequence[tuple[str, Detection]],
               nms_iou: float = 0.5) -> list[tuple[str, Detection]]:
    """Suppress across all objects within each image, as the protocol pools
    every object's predictions before scoring."""
    by_image: dict[str, list[Detection]] = {}
    for image_id, det in predictions:
        by_image.setdefault(image_id, []).append(det)
    surviving: list[tuple[str, Detection]] = []
    for image_id, dets in by_image.items():
        surviving.extend((image_id, d) for d in nms(dets, nms_iou))
    return surviving


def map_protocol(predictions: Sequence[tuple[str, Detection]],
                 gt: Mapping[str, Mapping[str, Sequence[BBox]]],
                 evaluable_objects: Sequence[str],
                 known_objects: Sequence[str] | None = None,
                 iou_threshold: float = 0.5,
                 nms_iou: float = 0.5,
                 eleven_point: bool = False) -> MapResult:
    """Pooled cross-object NMS, then per-object AP averaged over the
    evaluable set. ``known_objects`` may list extra ids whose predictions
    join the pooled NMS but never contribute an AP term."""
    evaluable = list(dict.fromkeys(evaluable_objects))
    known = set(evaluable) | set(known_objects or [])
    for _, det in predictions:
        if det.object_id not in known:
            raise ValueError(f"prediction for unknown object {det.object_id!r}")

    surviving = pooled_nms(predictions, nms_iou)
    per_object: dict[str, float] = {}
    for object_id in evaluable:
        preds_o = [(img, d) for img, d in surviving if d.object_id == object_id]
        gts_o = {img: list(objs.get(object_id, [])) for img, objs in gt.items()}
        per_object[object_id] = 100.0 * average_precision(
            preds_o, gts_o, iou_threshold, eleven_point
        )
    mean = sum(per_object.values()) / len(per_object) if per_object else 0.0
    return MapResult(per_object=per_object, mean=mean)


@dataclass
class ReportTable:
    metric: str
    rows: list[tuple[str, float]]
    mean: float

    @property
    def text(self) -> str:
        lines = [f"{'object':<16}{self.metric:>10}", "-" * 26]
        for name, value in self.rows:
            lines.append(f"{name:<16}{value:>10.2f}")
        lines.append("-" * 26)
        lines.append(f"{'mean':<16}{self.mean:>10.2f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "per_object": dict(self.rows),
                "mean": self.mean}


def per_object_report(values: Mapping[str, float] | Sequence[tuple[str, float]],
                      metric: str = "AP") -> ReportTable:
    rows = list(values.items()) if isinstance(values, Mapping) else list(values)
    if not rows:
        raise ValueError("report needs at least one row")
    mean = sum(v for _, v in rows) / len(rows)
    return ReportTable(metric=metric, rows=rows, mean=mean)


# Ground truth travels as a JSON manifest:
# {"images": {image_id: {object_id: [[x0, y0, x1, y1], ...]}}}

def write_gt_manifest(path, gt: Mapping[str, Mapping[str, Sequence[BBox]]]) -> None:
    payload = {
        "images": {
            image_id: {
                object_id: [[b.x_min, b.y_min, b.x_max, b.y_max] for b in boxes]
                for object_id, boxes in objects.items()
            }
            for image_id, objects in gt.items()
        }
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def read_gt_manifest(path) -> dict[str, dict[str, list[BBox]]]:
    payload = json.loads(Path(path).read_text())
    return {
        image_id: {
            object_id: [BBox(*row) for row in boxes]
            for object_id, boxes in objects.items()
        }
        for image_id, objects in payload["images"].items()
    }


def records_from_predictions(predictions: Sequence[tuple[str, Detection]],
                             gt: Mapping[str, Mapping[str, Sequence[BBox]]],
                             object_id: str) -> list[EvalRecord]:
    """Build one EvalRecord per image where the object appears, keeping only
    the highest-scored prediction (ties to the lowest template index)."""
    best: dict[str, Detection] = {}
    for image_id, det in predictions:
        if det.object_id != object_id:
            continue
        cur = best.get(image_id)
        if cur is None or (det.score, -det.template_index) > (cur.score, -cur.template_index):
            best[image_id] = det
    records = []
    for image_id, objects in sorted(gt.items()):
        boxes = objects.get(object_id)
        if not boxes:
            continue
        records.append(EvalRecord(image_id=image_id, object_id=object_id,
                                  prediction=best.get(image_id),
                                  gt_boxes=list(boxes)))
    return records


def write_report(out_dir, tables: Sequence[ReportTable],
                 pr_curves: Mapping[str, Sequence[tuple[float, float, float]]] | None = None) -> None:
    """Emit report.txt, results.json, and per-object PR CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text("\n\n".join(t.text for t in tables) + "\n")
    (out / "results.json").write_text(
        json.dumps([t.to_dict() for t in tables], indent=1, sort_keys=True)
    )
    for object_id, points in (pr_curves or {}).items():
        with open(out / f"pr_{object_id}.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["score", "recall", "precision"])
            writer.writerows(points)
