"""Synthetic scene generation with ground-truth labels.

Two scene styles are produced:

* ``tabletop`` — objects rest on a plane (kinematic placement with rejection
  sampling instead of a physics engine), viewed from a camera sampled on a
  half-sphere around the table center.
* ``composite`` — objects at random poses pasted over a background image
  (procedural noise by default, or images from a user directory).

Workers generating scenes in parallel should each derive their own seed;
nothing here shares mutable state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from temdet.boxes import BBox
from temdet.meshes import ObjectModel, make_cuboid
from temdet.rendering import FlatRasterizer, Intrinsics
from temdet.viewsphere import rotation_from_axis_angle, viewpoint_rotation


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    width: int = 640
    height: int = 480
    focal: float = 540.0
    camera_radius: tuple[float, float] = (0.8, 1.4)
    camera_angle_jitter_deg: float = 15.0
    upright_prob: float = 0.5
    table_extent: float = 0.45  # placement half-width on the table, meters
    table_size: float = 1.6
    composite_depth: tuple[float, float] = (0.5, 1.5)
    light_intensity: tuple[float, float] = (0.7, 1.2)
    min_visible_px: int = 20
    max_rejections: int = 200
    backgrounds_dir: str | None = None

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0)


@dataclass
class SceneObject:
    """Ground truth for one object in a scene, in camera coordinates."""

    object_id: str
    rotation: np.ndarray  # (3, 3) object-to-camera
    translation: np.ndarray  # (3,) object center in the camera frame
    bbox: BBox
    visibility_mask: np.ndarray  # (H, W) bool
    projected_center: np.ndarray  # (2,) pixels; may lie outside the image


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    objects: list[SceneObject]
    style: str  # "tabletop" or "composite"
    camera_position: np.ndarray | None = None  # world frame, tabletop only


def make_center_heatmap(center_px, out_shape, down_factor, variance=5.0) -> np.ndarray:
    """Gaussian heatmap with amplitude 1 at the (downscaled) object center.

    ``variance`` is sigma squared in output-grid pixel units; centers outside
    the grid simply yield a truncated Gaussian.
    """
    h, w = out_shape
    if h <= 0 or w <= 0:
        raise ValueError(f"output shape must be positive, got {out_shape}")
    cx = float(center_px[0]) / down_factor
    cy = float(center_px[1]) / down_factor
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return np.exp(-d2 / (2.0 * variance))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (random unit quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _horizontal_radius(model: ObjectModel, rotation: np.ndarray) -> float:
    v = model.vertices @ rotation.T
    return float(np.sqrt(v[:, 0] ** 2 + v[:, 1] ** 2).max())


def _rest_height(model: ObjectModel, rotation: np.ndarray) -> float:
    v = model.vertices @ rotation.T
    return float(-v[:, 2].min())


def _place_on_table(models, rng, cfg):
    """Non-penetrating placement: rejection sampling on the plane."""
    placed = []  # (rotation_world, position_world, radius)
    for model in models:
        if rng.uniform() < cfg.upright_prob:
            yaw = rng.uniform(0.0, 2.0 * math.pi)
            rot = rotation_from_axis_angle([0.0, 0.0, 1.0], yaw)
        else:
            rot = random_rotation(rng)
        radius = _horizontal_radius(model, rot)
        height = _rest_height(model, rot)
        for attempt in range(cfg.max_rejections + 1):
            if attempt == cfg.max_rejections:
                raise GenerationError(
                    f"could not place {model.object_id} after {cfg.max_rejections} tries"
                )
            xy = rng.uniform(-cfg.table_extent, cfg.table_extent, size=2)
            ok = all(
                np.hypot(*(xy - p[1][:2])) > radius + p[2] for p in placed
            )
            if ok:
                placed.append((rot, np.array([xy[0], xy[1], height]), radius))
                break
    return [(rot, pos) for rot, pos, _ in placed]


def _sample_camera(rng, cfg):
    """Half-sphere camera pointed at the table center, with angular jitter."""
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    v[2] = abs(v[2])
    radius = rng.uniform(*cfg.camera_radius)
    position = radius * v
    world_to_cam = viewpoint_rotation(v)
    jitter = math.radians(cfg.camera_angle_jitter_deg)
    for axis in np.eye(3):
        world_to_cam = rotation_from_axis_angle(axis, rng.uniform(-jitter, jitter)) @ world_to_cam
    return position, world_to_cam


def _procedural_background(rng, height, width):
    """Smooth low-frequency color field with mild pixel noise."""
    coarse = rng.uniform(0.1, 0.9, size=(6, 8, 3))
    zoom = (height / coarse.shape[0], width / coarse.shape[1], 1.0)
    bg = ndimage.zoom(coarse, zoom, order=1)[:height, :width]
    bg += rng.normal(0.0, 0.02, size=bg.shape)
    return np.clip(bg, 0.0, 1.0)


def _background_image(rng, cfg):
    if cfg.backgrounds_dir:
        files = sorted(Path(cfg.backgrounds_dir).glob("*"))
        files = [f for f in files if f.suffix.lower() in (".png", ".jpg", ".jpeg")]
        if files:
            pick = files[int(rng.integers(len(files)))]
            img = np.asarray(Image.open(pick).convert("RGB"), dtype=np.float64) / 255.0
            if img.shape[:2] != (cfg.height, cfg.width):
                zoom = (cfg.height / img.shape[0], cfg.width / img.shape[1], 1.0)
                img = ndimage.zoom(img, zoom, order=1)[: cfg.height, : cfg.width]
            return img
    return _procedural_background(rng, cfg.height, cfg.width)


def _table_model(rng, cfg):
    shade = rng.uniform(0.25, 0.8, size=3)
    table = make_cuboid("__table__", (cfg.table_size, cfg.table_size, 0.01),
                        colors=[tuple(shade)] * 6)
    return table


def _scene_gt(render_owner, items, intrinsics, offset, cfg):
    """Build per-object ground truth from the ownership map."""
    objects = []
    for idx, (model, rotation, translation) in enumerate(items):
        mask = render_owner == idx + offset
        if mask.sum() < cfg.min_visible_px:
            return None
        ys, xs = np.nonzero(mask)
        bbox = BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        center = intrinsics.project(translation[None, :])[0]
        if not np.all(np.isfinite(center)):
            return None
        objects.append(
            SceneObject(
                object_id=model.object_id,
                rotation=rotation,
                translation=translation,
                bbox=bbox,
                visibility_mask=mask,
                projected_center=center,
            )
        )
    return objects


def generate_scene(models: list[ObjectModel], rng: np.random.Generator,
                   style: str, cfg: SceneConfig | None = None,
                   rasterizer: FlatRasterizer | None = None) -> SceneSample:
    """Render one labeled scene. Reproducible given the generator state."""
    if not models:
        raise ValueError("need at least one object model")
    if style not in ("tabletop", "composite"):
        raise ValueError(f"unknown scene style {style!r}")
    cfg = cfg or SceneConfig()
    rasterizer = rasterizer or FlatRasterizer()

    for _ in range(25):
        sample = _try_generate(models, rng, style, cfg, rasterizer)
        if sample is not None:
            return sample
    raise GenerationError(f"failed to produce a scene with all {len(models)} objects visible")


def _try_generate(models, rng, style, cfg, rasterizer):
    intr = cfg.intrinsics
    light = rng.uniform(*cfg.light_intensity) * rng.uniform(0.85, 1.0, size=3)

    if style == "tabletop":
        placements = _place_on_table(models, rng, cfg)
        position, world_to_cam = _sample_camera(rng, cfg)
        items = []
        for model, (rot_w, pos_w) in zip(models, placements):
            rotation = world_to_cam @ rot_w
            translation = world_to_cam @ (pos_w - position)
            items.append((model, rotation, translation))
        table = _table_model(rng, cfg)
        table_rot = world_to_cam
        table_t = world_to_cam @ (np.array([0.0, 0.0, -0.006]) - position)
        rgb, _, owner = rasterizer.render_objects(
            [(table, table_rot, table_t)] + items, intr, cfg.width, cfg.height,
            light_color=light,
        )
        objects = _scene_gt(owner, items, intr, offset=1, cfg=cfg)
        if objects is None:
            return None
        background = _procedural_background(rng, cfg.height, cfg.width)
        image = np.where((owner >= 0)[:, :, None], rgb, background)
        return SceneSample(image=image, objects=objects, style="tabletop",
                           camera_position=position)

    # composite: independent random poses over a background image
    items = []
    for model in models:
        rotation = random_rotation(rng)
        depth = rng.uniform(*cfg.composite_depth)
        margin = 0.15
        u = rng.uniform(margin * cfg.width, (1 - margin) * cfg.width)
        v = rng.uniform(margin * cfg.height, (1 - margin) * cfg.height)
        translation = np.array(
            [(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth]
        )
        items.append((model, rotation, translation))
    rgb, _, owner = rasterizer.render_objects(items, intr, cfg.width, cfg.height,
                                              light_color=light)
    objects = _scene_gt(owner, items, intr, offset=0, cfg=cfg)
    if objects is None:
        return None
    background = _background_image(rng, cfg)
    image = np.where((owner >= 0)[:, :, None], rgb, background)
    return SceneSample(image=image, objects=objects, style="composite")


# On-disk layout: one directory per scene holding image.png, one mask PNG per
# object, and metadata.json; a manifest.json at the root lists every scene.

def save_scene(sample: SceneSample, scene_dir) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray((sample.image * 255.0).round().astype(np.uint8)).save(
        scene_dir / "image.png"
    )
    meta_objects = []
    for k, obj in enumerate(sample.objects):
        Image.fromarray(obj.visibility_mask.astype(np.uint8) * 255).save(
            scene_dir / f"mask_{k:02d}_{obj.object_id}.png"
        )
        meta_objects.append(
            {
                "object_id": obj.object_id,
                "rotation": [round(float(v), 9) for v in obj.rotation.reshape(-1)],
                "translation": [round(float(v), 9) for v in obj.translation],
                "bbox": [obj.bbox.x_min, obj.bbox.y_min, obj.bbox.x_max, obj.bbox.y_max],
                "projected_center": [round(float(v), 6) for v in obj.projected_center],
            }
        )
    meta = {
        "style": sample.style,
        "objects": meta_objects,
        "camera_position": None
        if sample.camera_position is None
        else [round(float(v), 9) for v in sample.camera_position],
    }
    (scene_dir / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_scene(scene_dir) -> SceneSample:
    scene_dir = Path(scene_dir)
    image = np.asarray(Image.open(scene_dir / "image.png"), dtype=np.float64) / 255.0
    meta = json.loads((scene_dir / "metadata.json").read_text())
    objects = []
    for k, rec in enumerate(meta["objects"]):
        mask_path = scene_dir / f"mask_{k:02d}_{rec['object_id']}.png"
        mask = np.asarray(Image.open(mask_path)) > 127
        objects.append(
            SceneObject(
                object_id=rec["object_id"],
                rotation=np.array(rec["rotation"]).reshape(3, 3),
                translation=np.array(rec["translation"]),
                bbox=BBox(*rec["bbox"]),
                visibility_mask=mask,
                projected_center=np.array(rec["projected_center"]),
            )
        )
    camera = meta.get("camera_position")
    return SceneSample(
        image=image,
        objects=objects,
        style=meta["style"],
        camera_position=None if camera is None else np.array(camera),
    )


def write_manifest(root, scene_names: list[str]) -> None:
    (Path(root) / "manifest.json").write_text(
        json.dumps({"scenes": scene_names}, indent=1)
    )


def read_manifest(root) -> list[str]:
    return json.loads((Path(root) / "manifest.json").read_text())["scenes"]


def sample_batch(datasets: dict[str, list], rng: np.random.Generator,
                 batch_size: int, tabletop_ratio: float = 0.8) -> list[tuple[SceneSample, int]]:
    """Draw a training batch, mixing styles at the configured ratio.

    ``datasets`` maps style name to a list of scene samples. Each batch item
    is (scene, target_object_index); the remaining objects act as distractors.
    """
    for style, prob in (("tabletop", tabletop_ratio), ("composite", 1.0 - tabletop_ratio)):
        if prob > 0.0 and not datasets.get(style):
            raise ValueError(f"style {style!r} required at ratio {prob} but dataset is empty")
    batch = []
    for _ in range(batch_size):
        style = "tabletop" if rng.uniform() < tabletop_ratio else "composite"
        pool = datasets[style]
        scene = pool[int(rng.integers(len(pool)))]
        target = int(rng.integers(len(scene.objects)))
        batch.append((scene, target))
    return batch
