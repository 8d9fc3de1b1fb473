"""Axis-aligned box arithmetic, anchor grids, NMS and size-based depth estimation.

Boxes use the (x_min, y_min, x_max, y_max) pixel convention throughout.
Everything here is pure and stateless, so it is safe to call from parallel
workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with continuous pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "BBox":
        x0, y0, x1, y1 = (float(v) for v in arr)
        return BBox(x0, y0, x1, y1)

    def clip(self, width: float, height: float) -> "BBox":
        """Clip to image bounds; only intended at evaluation/export time."""
        return BBox(
            min(max(self.x_min, 0.0), width - 1e-6),
            min(max(self.y_min, 0.0), height - 1e-6),
            max(min(self.x_max, width), 1e-6),
            max(min(self.y_max, height), 1e-6),
        )


@dataclass
class Detection:
    """A scored box prediction for one object from one local template."""

    bbox: BBox
    score: float
    template_index: int
    object_id: str
    est_depth: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes. Symmetric, 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def iou_matrix(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) / (M, 4) arrays of xyxy boxes."""
    boxes1 = np.asarray(boxes1, dtype=np.float64)
    boxes2 = np.asarray(boxes2, dtype=np.float64)
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])

    lt = np.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = np.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    return inter / (area1[:, None] + area2[None, :] - inter)


@dataclass
class AnchorGrid:
    """Anchor boxes tiled over a feature map.

    Anchor order is row-major over cells, then scales, then ratios, so the
    flat index is ``((i * W + j) * n_scales + s) * n_ratios + r``.
    """

    feature_height: int
    feature_width: int
    stride: int
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    anchors: np.ndarray = field(repr=False)  # (N, 4) xyxy

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return self.anchors.shape[0]


DEFAULT_SCALES = (30.0, 60.0, 90.0, 120.0, 150.0, 180.0, 210.0, 240.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)


def generate_anchors(
    feature_height: int,
    feature_width: int,
    stride: int,
    scales: Sequence[float] = DEFAULT_SCALES,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> AnchorGrid:
    """Tile scale/ratio anchors over a feature grid.

    Centers sit at ``((j + 0.5) * stride, (i + 0.5) * stride)``. A box of
    scale s and ratio r has width ``s * sqrt(r)`` and height ``s / sqrt(r)``,
    preserving area s**2 for every ratio.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")

    scales = np.asarray(scales, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)

    ws = (scales[:, None] * np.sqrt(ratios)[None, :]).reshape(-1)  # (S*R,)
    hs = (scales[:, None] / np.sqrt(ratios)[None, :]).reshape(-1)

    cx = (np.arange(feature_width, dtype=np.float64) + 0.5) * stride
    cy = (np.arange(feature_height, dtype=np.float64) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)  # (H*W, 1, 2)

    half = 0.5 * np.stack([ws, hs], axis=-1)[None, :, :]  # (1, S*R, 2)
    boxes = np.concatenate([centers - half, centers + half], axis=-1)
    return AnchorGrid(
        feature_height=feature_height,
        feature_width=feature_width,
        stride=stride,
        scales=tuple(float(s) for s in scales),
        ratios=tuple(float(r) for r in ratios),
        anchors=boxes.reshape(-1, 4),
    )


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression by descending score.

    A detection is suppressed when its IoU with an already kept, higher
    scored detection exceeds ``iou_threshold``. Score ties are broken by
    input order, so results are deterministic for a fixed input list.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not dets:
        return []

    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = np.stack([dets[i].bbox.as_array() for i in order])

    keep: list[int] = []
    alive = np.arange(len(order))
    while alive.size:
        top = alive[0]
        keep.append(order[top])
        rest = alive[1:]
        ious = iou_matrix(boxes[top][None, :], boxes[rest])[0]
        alive = rest[ious <= iou_threshold]
    return [dets[i] for i in keep]


def estimate_depth(pred: BBox, template_render_depth: float, template_size: float = 124.0) -> float:
    """Depth from apparent size: render depth scaled by template/prediction size.

    Prediction size is the longest box side, which matches how templates are
    framed by their largest projected extent.
    """
    if template_render_depth <= 0.0:
        raise ValueError(f"render depth must be positive, got {template_render_depth}")
    size = max(pred.width, pred.height)
    if size <= 0.0:
        raise ValueError("zero-size box")
    return template_render_depth * (template_size / size)


def filter_by_depth(
    dets: Iterable[Detection], min_depth: float, max_depth: float
) -> list[Detection]:
    """Keep detections whose estimated depth lies in [min_depth, max_depth]."""
    if min_depth >= max_depth:
        raise ValueError(f"need min_depth < max_depth, got [{min_depth}, {max_depth}]")
    kept = []
    for det in dets:
        if det.est_depth is None:
            raise ValueError("detection has no estimated depth; run estimate_depth first")
        if min_depth <= det.est_depth <= max_depth:
            kept.append(det)
    return kept


def with_depth(det: Detection, render_depth: float, template_size: float = 124.0) -> Detection:
    return replace(det, est_depth=estimate_depth(det.bbox, render_depth, template_size))


# Line-delimited record format shared by the CLI and the evaluation tooling:
# image_id,object_id,x_min,y_min,x_max,y_max,score,est_depth

def format_detection(image_id: str, det: Detection) -> str:
    depth = det.est_depth if det.est_depth is not None else float("nan")
    b = det.bbox
    return (
        f"{image_id},{det.object_id},{b.x_min:.6f},{b.y_min:.6f},"
        f"{b.x_max:.6f},{b.y_max:.6f},{det.score:.6f},{depth:.6f}"
    )


def parse_detection(line: str) -> tuple[str, Detection]:
    parts = line.strip().split(",")
    if len(parts) != 8:
        raise ValueError(f"expected 8 comma-separated fields, got {len(parts)}: {line!r}")
    image_id, object_id = parts[0], parts[1]
    x0, y0, x1, y1, score, depth = (float(p) for p in parts[2:])
    det = Detection(
        bbox=BBox(x0, y0, x1, y1),
        score=score,
        template_index=-1,
        object_id=object_id,
        est_depth=None if np.isnan(depth) else depth,
    )
    return image_id, det


def write_detections(path, records: Iterable[tuple[str, Detection]]) -> None:
    with open(path, "w") as f:
        for image_id, det in records:
            f.write(format_detection(image_id, det) + "\n")


def read_detections(path) -> list[tuple[str, Detection]]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(parse_detection(line))
    return out
