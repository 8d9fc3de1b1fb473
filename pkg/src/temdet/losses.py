"""Anchor assignment, box codec, and the four-term training objective.

Assignment and the box codec are numpy (they feed target construction);
the loss terms are torch so they participate in autograd. The combined
objective is ``lambda_seg * seg + lambda_center * center + focal + reg``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from temdet.boxes import BBox, iou_matrix


class TrainingDiverged(RuntimeError):
    """A loss component stopped being finite."""


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (N,) int8: 1 positive, 0 negative, -1 ignore
    reg_targets: np.ndarray  # (N, 4) float64, valid where labels == 1

    def __post_init__(self):
        if self.labels.shape[0] != self.reg_targets.shape[0]:
            raise ValueError("labels and reg_targets disagree on anchor count")

    @property
    def n_positive(self) -> int:
        return int((self.labels == 1).sum())


def assign_anchors(anchors: np.ndarray, gt_box: BBox,
                   pos_iou: float = 0.5, neg_iou: float = 0.4) -> AnchorTargets:
    """Threshold assignment: IoU >= pos positive, < neg negative, else ignored."""
    if len(anchors) == 0:
        raise ValueError("empty anchor set")
    ious = iou_matrix(anchors, gt_box.as_array()[None, :])[:, 0]
    labels = np.full(len(anchors), -1, dtype=np.int8)
    labels[ious >= pos_iou] = 1
    labels[ious < neg_iou] = 0
    reg_targets = np.zeros((len(anchors), 4), dtype=np.float64)
    pos = labels == 1
    if pos.any():
        reg_targets[pos] = encode_boxes(anchors[pos], gt_box)
    return AnchorTargets(labels=labels, reg_targets=reg_targets)


def _centers_sizes(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("boxes must have positive width and height")
    cx = boxes[:, 0] + w / 2.0
    cy = boxes[:, 1] + h / 2.0
    return cx, cy, w, h


def encode_boxes(anchors: np.ndarray, gt: BBox) -> np.ndarray:
    """(tx, ty, tw, th) of ``gt`` relative to each anchor row."""
    ax, ay, aw, ah = _centers_sizes(np.asarray(anchors, dtype=np.float64))
    gx, gy = gt.center
    t = np.empty((len(anchors), 4), dtype=np.float64)
    t[:, 0] = (gx - ax) / aw
    t[:, 1] = (gy - ay) / ah
    t[:, 2] = np.log(gt.width / aw)
    t[:, 3] = np.log(gt.height / ah)
    return t


def decode_boxes(anchors: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`encode_boxes`; returns (N, 4) corner boxes."""
    ax, ay, aw, ah = _centers_sizes(np.asarray(anchors, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    cx = ax + t[:, 0] * aw
    cy = ay + t[:, 1] * ah
    w = aw * np.exp(t[:, 2])
    h = ah * np.exp(t[:, 3])
    out = np.empty_like(t)
    out[:, 0] = cx - w / 2.0
    out[:, 1] = cy - h / 2.0
    out[:, 2] = cx + w / 2.0
    out[:, 3] = cy + h / 2.0
    return out


def encode_box(anchor: BBox, gt: BBox) -> np.ndarray:
    return encode_boxes(anchor.as_array()[None, :], gt)[0]


def decode_box(anchor: BBox, t: np.ndarray) -> BBox:
    return BBox.from_array(decode_boxes(anchor.as_array()[None, :],
                                        np.asarray(t)[None, :])[0])


def focal_loss(logits: torch.Tensor, labels: torch.Tensor,
               gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Sum of the focal term over non-ignored anchors, divided by the number
    of positives (floor 1). ``labels`` must already exclude ignored anchors."""
    if logits.shape != labels.shape:
        raise ValueError("logits and labels must align")
    ce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * labels + (1.0 - p) * (1.0 - labels)
    alpha_t = alpha * labels + (1.0 - alpha) * (1.0 - labels)
    loss = alpha_t * (1.0 - p_t).pow(gamma) * ce
    n_pos = labels.sum().clamp(min=1.0)
    return loss.sum() / n_pos


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixelwise binary cross-entropy on the full-resolution mask."""
    return F.binary_cross_entropy_with_logits(logits, target)


def center_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 distance between predicted and ground-truth heatmaps."""
    return (pred - target).abs().mean()


def regression_loss(pred_t: torch.Tensor, target_t: torch.Tensor,
                    beta: float = 1.0) -> torch.Tensor:
    """Smooth-L1 summed per anchor, averaged over positive anchors.

    Call with the positive-anchor rows only; no positives contributes 0.
    """
    if pred_t.numel() == 0:
        return pred_t.sum() * 0.0
    return F.smooth_l1_loss(pred_t, target_t, beta=beta, reduction="sum") / pred_t.shape[0]


def total_loss(seg, center, fl, reg, lambda_seg: float = 20.0,
               lambda_center: float = 20.0):
    """Weighted sum; raises :class:`TrainingDiverged` naming the first
    non-finite component."""
    for name, value in (("seg", seg), ("center", center), ("fl", fl), ("reg", reg)):
        v = float(value.detach() if torch.is_tensor(value) else value)
        if not np.isfinite(v):
            raise TrainingDiverged(f"loss component {name!r} is non-finite ({v})")
    return lambda_seg * seg + lambda_center * center + fl + reg
