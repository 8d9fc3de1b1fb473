"""Training loop: batch assembly, head targets, schedule, checkpointing.

Each batch item pairs a scene with one target object. The pose branch gets a
local template rendered at the target's ground-truth orientation jittered by
a random rotation; the attention branch gets one of the object's 240 global
templates, sampled per item. Validation runs at the end of every epoch with
its own fixed random stream so losses are comparable across epochs, and the
checkpoint with the smallest validation loss is kept.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from temdet.augment import AugmentConfig, augment
from temdet.boxes import generate_anchors
from temdet.config import RunConfig
from temdet.losses import (
    TrainingDiverged,
    assign_anchors,
    center_loss,
    focal_loss,
    regression_loss,
    segmentation_loss,
    total_loss,
)
from temdet.meshes import ObjectModel
from temdet.model import (
    CorrelationNet,
    flatten_cls,
    flatten_reg,
    image_to_tensor,
    load_checkpoint,
    save_checkpoint,
    template_to_tensor,
)
from temdet.rendering import FlatRasterizer, Renderer, Template, make_framed_template
from temdet.scenes import SceneSample, make_center_heatmap, sample_batch
from temdet.viewsphere import (
    PerturbationSpec,
    Pose,
    global_template_poses,
    perturb_rotation,
)


@dataclass
class TemplateSource:
    """Renders training templates, caching the global poses it has seen."""

    models: dict[str, ObjectModel]
    renderer: Renderer
    perturbation: PerturbationSpec
    global_poses: list[Pose] = field(default_factory=global_template_poses)
    _cache: dict[tuple[str, int], Template] = field(default_factory=dict)

    def global_template(self, object_id: str, index: int) -> Template:
        key = (object_id, index)
        if key not in self._cache:
            pose = self.global_poses[index]
            self._cache[key] = make_framed_template(
                self.renderer, self.models[object_id], pose.rotation
            )
        return self._cache[key]

    def local_template(self, object_id: str, rotation: np.ndarray,
                       rng: np.random.Generator) -> Template:
        pose = perturb_rotation(Pose(rotation, 1.0), self.perturbation, rng)
        return make_framed_template(self.renderer, self.models[object_id],
                                    pose.rotation)


@dataclass
class BatchTargets:
    images: torch.Tensor  # (B, 3, H, W)
    global_templates: torch.Tensor  # (B, 4, 124, 124)
    local_templates: torch.Tensor  # (B, 4, 124, 124)
    labels: torch.Tensor  # (B, N) int8: 1 pos, 0 neg, -1 ignore
    reg_targets: torch.Tensor  # (B, N, 4)
    seg: torch.Tensor  # (B, H, W)
    center: torch.Tensor  # (B, hf, wf)


def build_targets(items: list[tuple[SceneSample, int]], source: TemplateSource,
                  cfg: RunConfig, corr_hw: tuple[int, int],
                  rng: np.random.Generator,
                  augment_cfg: AugmentConfig | None = None,
                  dtype=torch.float32) -> BatchTargets:
    """Assemble network inputs and per-head targets for one batch."""
    hf, wf = corr_hw
    grid = generate_anchors(hf, wf, cfg.network.stride,
                            cfg.network.scales, cfg.network.ratios)
    images, globals_, locals_ = [], [], []
    labels, regs, segs, centers = [], [], [], []
    for scene, target_index in items:
        target = scene.objects[target_index]
        local = source.local_template(target.object_id, target.rotation, rng)
        if augment_cfg is not None:
            scene, local = augment(scene, local, augment_cfg, rng, target_index)
            target = scene.objects[target_index]
        g_index = int(rng.integers(len(source.global_poses)))
        globals_.append(template_to_tensor(source.global_template(
            target.object_id, g_index), dtype))
        locals_.append(template_to_tensor(local, dtype))
        images.append(image_to_tensor(scene.image, dtype))

        t = assign_anchors(grid.anchors, target.bbox,
                           cfg.loss.pos_iou, cfg.loss.neg_iou)
        labels.append(torch.from_numpy(t.labels))
        regs.append(torch.as_tensor(t.reg_targets, dtype=dtype))
        segs.append(torch.as_tensor(
            target.visibility_mask.astype(np.float64), dtype=dtype))
        centers.append(torch.as_tensor(make_center_heatmap(
            target.projected_center, (hf, wf), cfg.network.stride,
            cfg.loss.heatmap_variance), dtype=dtype))
    return BatchTargets(
        images=torch.stack(images),
        global_templates=torch.stack(globals_),
        local_templates=torch.stack(locals_),
        labels=torch.stack(labels),
        reg_targets=torch.stack(regs),
        seg=torch.stack(segs),
        center=torch.stack(centers),
    )


def compute_losses(outputs: dict, targets: BatchTargets, cfg: RunConfig) -> dict:
    """The four loss terms plus their weighted total, as scalar tensors."""
    k = cfg.network.anchors_per_cell
    cls_flat = flatten_cls(outputs["cls"])
    reg_flat = flatten_reg(outputs["reg"], k)
    keep = targets.labels >= 0
    fl = focal_loss(cls_flat[keep], targets.labels[keep].to(cls_flat.dtype),
                    cfg.loss.focal_gamma, cfg.loss.focal_alpha)
    pos = targets.labels == 1
    reg = regression_loss(reg_flat[pos], targets.reg_targets[pos],
                          cfg.loss.smooth_l1_beta)
    seg = segmentation_loss(outputs["seg"][:, 0], targets.seg)
    center = center_loss(outputs["center"][:, 0], targets.center)
    total = total_loss(seg, center, fl, reg,
                       cfg.loss.lambda_seg, cfg.loss.lambda_center)
    return {"seg": seg, "center": center, "fl": fl, "reg": reg, "total": total}


def train_step(model: CorrelationNet, optimizer, targets: BatchTargets,
               cfg: RunConfig) -> dict:
    outputs = model(targets.images, targets.global_templates,
                    targets.local_templates)
    losses = compute_losses(outputs, targets, cfg)
    optimizer.zero_grad()
    losses["total"].backward()
    optimizer.step()
    return {name: float(value.detach()) for name, value in losses.items()}


def validation_items(val_scenes: list[SceneSample],
                     limit: int | None = None) -> list[tuple[SceneSample, int]]:
    """Every (scene, target) pair in a fixed order, optionally capped."""
    items = [(scene, t) for scene in val_scenes
             for t in range(len(scene.objects))]
    return items if limit is None else items[:limit]


def validate(model: CorrelationNet, items, source: TemplateSource,
             cfg: RunConfig, corr_hw: tuple[int, int]) -> float:
    """Mean total loss over the validation items.

    Template draws come from a stream seeded only by the run seed, so every
    epoch sees identical validation inputs and losses stay comparable.
    """
    rng = np.random.default_rng([cfg.train.seed, 9973])
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(items), cfg.train.batch_size):
            chunk = items[start:start + cfg.train.batch_size]
            targets = build_targets(chunk, source, cfg, corr_hw, rng)
            outputs = model(targets.images, targets.global_templates,
                            targets.local_templates)
            losses = compute_losses(outputs, targets, cfg)
            total += float(losses["total"]) * len(chunk)
            count += len(chunk)
    if was_training:
        model.train()
    if count == 0:
        raise ValueError("validation set is empty")
    return total / count


def append_metrics(path, row: dict) -> None:
    with open(path, "a") as handle:
        handle.write(json.dumps(row, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path) as handle:
        for line in handle:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def train(cfg: RunConfig, models: dict[str, ObjectModel],
          train_scenes: dict[str, list[SceneSample]],
          val_scenes: list[SceneSample], out_dir,
          renderer: Renderer | None = None, max_iters: int | None = None,
          resume_from=None, log=None) -> dict:
    """Run the optimization schedule; returns a summary dict.

    ``train_scenes`` maps style name to scene lists (the batch sampler mixes
    them 80/20 by default). ``max_iters`` caps total iterations for short
    runs; the schedule otherwise runs epochs x iters_per_epoch. Resuming
    restores model, optimizer, scheduler, iteration counter, and the data
    stream, so a resumed run continues the original one exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    best_path = out_dir / "checkpoint_best.pt"
    last_path = out_dir / "checkpoint_last.pt"

    torch.manual_seed(cfg.train.seed)
    rng = np.random.default_rng([cfg.train.seed, 1])
    source = TemplateSource(models=models, renderer=renderer or FlatRasterizer(),
                            perturbation=PerturbationSpec(cfg.train.perturb_deg))

    payload = None
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
    else:
        model = CorrelationNet(cfg.network)
        if metrics_path.exists():
            metrics_path.unlink()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr,
                                 weight_decay=cfg.train.weight_decay,
                                 amsgrad=cfg.train.amsgrad)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(cfg.train.lr_milestones),
        gamma=cfg.train.lr_decay)

    iteration, start_epoch, best_val = 0, 0, float("inf")
    if payload is not None:
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        iteration = payload["iteration"]
        start_epoch = payload["epoch"] + 1
        best_val = payload["best_val"]
        rng.bit_generator.state = payload["rng_state"]
    model.train()

    h, w = cfg.data.scene.height, cfg.data.scene.width
    corr_hw = model.backbone.corr_map_size(h, w)

    val_items = validation_items(
        val_scenes, cfg.train.val_batches * cfg.train.batch_size)
    summary = {"best_checkpoint": str(best_path), "last_checkpoint": str(last_path),
               "metrics": str(metrics_path), "best_val": best_val}

    for epoch in range(start_epoch, cfg.train.epochs):
        epoch_start = time.monotonic()
        for _ in range(cfg.train.iters_per_epoch):
            if max_iters is not None and iteration >= max_iters:
                break
            batch = sample_batch(train_scenes, rng, cfg.train.batch_size,
                                 cfg.data.tabletop_ratio)
            targets = build_targets(batch, source, cfg, corr_hw, rng,
                                    augment_cfg=cfg.data.augment)
            try:
                losses = train_step(model, optimizer, targets, cfg)
            except TrainingDiverged as err:
                raise TrainingDiverged(
                    f"{err} at iteration {iteration} (epoch {epoch}, "
                    f"lr {optimizer.param_groups[0]['lr']:g})"
                ) from err
            iteration += 1
            append_metrics(metrics_path, {
                "kind": "train", "iteration": iteration, "epoch": epoch,
                "lr": optimizer.param_groups[0]["lr"], **losses,
            })
        stopped = max_iters is not None and iteration >= max_iters
        if not stopped:
            scheduler.step()

        val = validate(model, val_items, source, cfg, corr_hw)
        improved = val < best_val
        if improved:
            best_val = val
            save_checkpoint(best_path, model,
                            {"iteration": iteration, "epoch": epoch,
                             "val_loss": val})
        append_metrics(metrics_path, {
            "kind": "val", "iteration": iteration, "epoch": epoch,
            "total": val, "best": improved,
            "epoch_seconds": round(time.monotonic() - epoch_start, 3),
        })
        save_checkpoint(last_path, model, {
            "iteration": iteration, "epoch": epoch, "best_val": best_val,
            "optimizer": optimizer.state_dict(),
            "scheduler": scheduler.state_dict(),
            "rng_state": rng.bit_generator.state,
        })
        model.train()
        if log is not None:
            log(f"epoch {epoch}: iteration {iteration}, val {val:.4f}"
                f"{' (best)' if improved else ''}")
        if stopped:
            break

    summary["best_val"] = best_val
    summary["iterations"] = iteration
    return summary
