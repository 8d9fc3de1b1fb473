"""Multi-template inference: precompute, accumulate, suppress, select.

The backbone runs once per (image, object); template embeddings are applied
in batches on top of the shared feature map. Predictions from every local
template are pooled, depth-filtered, and reduced by NMS. Each surviving
detection remembers which template produced it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from temdet.boxes import (
    BBox,
    Detection,
    estimate_depth,
    filter_by_depth,
    generate_anchors,
    nms,
)
from temdet.config import InferConfig
from temdet.losses import decode_boxes
from temdet.model import CorrelationNet, flatten_cls, flatten_reg, image_to_tensor, template_to_tensor
from temdet.rendering import Renderer, Template, make_framed_template
from temdet.viewsphere import global_template_poses, local_template_poses_test

STANDARD_LOCAL_COUNTS = (80, 160, 320)


@dataclass
class PrecomputedEmbeddings:
    filters: torch.Tensor  # (1, C0, fs, fs) tunable filter bank
    e1: torch.Tensor  # (T, C, 1, 1)
    e3: torch.Tensor  # (T, C, 3, 3)


@dataclass
class TemplateBank:
    object_id: str
    global_template: Template
    local_templates: list[Template]
    precomputed: PrecomputedEmbeddings | None = None

    def __post_init__(self):
        if not self.local_templates:
            raise ValueError("template bank needs at least one local template")
        ids = {self.global_template.object_id} | {
            t.object_id for t in self.local_templates
        }
        if ids != {self.object_id}:
            raise ValueError(f"bank for {self.object_id!r} mixes object ids {ids}")

    def __len__(self) -> int:
        return len(self.local_templates)


def build_template_bank(renderer: Renderer, model3d, n_inplane: int = 10,
                        global_pose_index: int = 0,
                        rng: np.random.Generator | None = None) -> TemplateBank:
    """Render the standard bank: one global template plus the local stack.

    ``rng`` picks the global template at random (the choice barely matters);
    otherwise ``global_pose_index`` selects it deterministically.
    """
    global_poses = global_template_poses()
    if rng is not None:
        global_pose_index = int(rng.integers(len(global_poses)))
    if not 0 <= global_pose_index < len(global_poses):
        raise ValueError(f"global pose index {global_pose_index} out of range")
    global_template = make_framed_template(
        renderer, model3d, global_poses[global_pose_index].rotation
    )
    locals_ = [
        make_framed_template(renderer, model3d, pose.rotation)
        for pose in local_template_poses_test(n_inplane)
    ]
    if len(locals_) not in STANDARD_LOCAL_COUNTS:
        raise ValueError(f"non-standard local template count {len(locals_)}")
    return TemplateBank(object_id=model3d.object_id,
                        global_template=global_template,
                        local_templates=locals_)


def precompute(bank: TemplateBank, model: CorrelationNet,
               batch_size: int = 32) -> TemplateBank:
    """Cache OAB filters and PSB embeddings; already-cached banks pass through."""
    if bank.precomputed is not None:
        return bank
    model.eval()
    with torch.no_grad():
        g = template_to_tensor(bank.global_template).unsqueeze(0)
        filters = model.oab_forward(g)
        e1_parts, e3_parts = [], []
        for start in range(0, len(bank.local_templates), batch_size):
            chunk = bank.local_templates[start:start + batch_size]
            batch = torch.stack([template_to_tensor(t) for t in chunk])
            e1, e3 = model.psb_forward(batch)
            e1_parts.append(e1)
            e3_parts.append(e3)
    cached = PrecomputedEmbeddings(filters=filters,
                                   e1=torch.cat(e1_parts),
                                   e3=torch.cat(e3_parts))
    return dataclasses.replace(bank, precomputed=cached)


def _template_detections(scores_flat, t_flat, anchors, template_index, bank,
                         cfg, width, height):
    keep = np.nonzero(scores_flat > cfg.score_threshold)[0]
    if len(keep) == 0:
        return []
    order = keep[np.argsort(-scores_flat[keep], kind="stable")]
    order = order[: cfg.max_per_template]
    boxes = decode_boxes(anchors[order], t_flat[order])
    render_depth = bank.local_templates[template_index].render_depth
    out = []
    for row, anchor_idx in zip(boxes, order):
        x_min, y_min, x_max, y_max = row
        if x_max <= 0 or y_max <= 0 or x_min >= width or y_min >= height:
            continue
        bbox = BBox(x_min, y_min, x_max, y_max).clip(width, height)
        det = Detection(
            bbox=bbox,
            score=float(np.clip(scores_flat[anchor_idx], 0.0, 1.0)),
            template_index=template_index,
            object_id=bank.object_id,
            est_depth=estimate_depth(bbox, render_depth),
        )
        out.append(det)
    return out


def detect(image: np.ndarray, bank: TemplateBank, model: CorrelationNet,
           cfg: InferConfig | None = None) -> list[Detection]:
    """Run the full multi-template pipeline on one image.

    Deterministic for a fixed (model, image, bank); returns detections
    sorted by descending score.
    """
    cfg = cfg or InferConfig()
    bank = precompute(bank, model, cfg.template_batch)
    model.eval()
    height, width = image.shape[:2]
    k = model.cfg.anchors_per_cell
    pooled: list[Detection] = []
    with torch.no_grad():
        x = image_to_tensor(image).unsqueeze(0)
        features = model.backbone_forward(x, bank.precomputed.filters)
        grid = None
        n_templates = len(bank)
        for start in range(0, n_templates, cfg.template_batch):
            stop = min(start + cfg.template_batch, n_templates)
            e1 = bank.precomputed.e1[start:stop]
            e3 = bank.precomputed.e3[start:stop]
            corr = model.correlate(features.expand(stop - start, -1, -1, -1), e1, e3)
            cls, reg = model.cls_reg_forward(corr)
            if grid is None:
                hf, wf = cls.shape[-2:]
                grid = generate_anchors(hf, wf, model.cfg.stride,
                                        model.cfg.scales, model.cfg.ratios)
            scores = torch.sigmoid(flatten_cls(cls)).numpy()
            offsets = flatten_reg(reg, k).numpy()
            for i in range(stop - start):
                pooled.extend(
                    _template_detections(scores[i], offsets[i], grid.anchors,
                                         start + i, bank, cfg, width, height)
                )
    if cfg.depth_filter and cfg.depth_filter_before_nms:
        pooled = filter_by_depth(pooled, *cfg.depth_range)
    kept = nms(pooled, cfg.nms_iou)
    if cfg.depth_filter and not cfg.depth_filter_before_nms:
        kept = filter_by_depth(kept, *cfg.depth_range)
    return kept


def select_top_per_object(dets: list[Detection]) -> Detection | None:
    """Best detection by score; ties break toward the lowest template index."""
    if not dets:
        return None
    ids = {d.object_id for d in dets}
    if len(ids) > 1:
        raise ValueError(f"detections mix object ids {sorted(ids)}")
    return min(dets, key=lambda d: (-d.score, d.template_index))


def draw_detections(image: np.ndarray, dets: list[Detection],
                    gt_boxes: list[BBox] | None = None):
    """Annotated copy of the image (predictions green, ground truth white)."""
    from PIL import Image, ImageDraw

    canvas = Image.fromarray((np.clip(image, 0.0, 1.0) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for box in gt_boxes or []:
        draw.rectangle([box.x_min, box.y_min, box.x_max - 1, box.y_max - 1],
                       outline=(255, 255, 255), width=1)
    for det in dets:
        b = det.bbox
        draw.rectangle([b.x_min, b.y_min, b.x_max - 1, b.y_max - 1],
                       outline=(0, 220, 0), width=1)
        draw.text((b.x_min + 2, max(0.0, b.y_min - 10)), f"{det.score:.2f}",
                  fill=(0, 220, 0))
    return canvas
