"""Template rendering: framing, the renderer interface, a reference rasterizer.

The built-in :class:`FlatRasterizer` is a plain z-buffered software renderer
(flat shading, one directional light with a Lambert term clamped to
[0.3, 1]). It keeps the whole pipeline testable without GPU or asset
dependencies; real mesh renderers can plug in behind the same ``render``
signature. Renderer instances are cheap and should not be shared across
worker processes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from temdet.meshes import ObjectModel
from temdet.viewsphere import Pose

TEMPLATE_SIZE = 124
FRAMING_BAND = (100.0, 115.0)
FRAMING_TARGET = 0.5 * (FRAMING_BAND[0] + FRAMING_BAND[1])  # 107.5 px


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """(N, 3) camera-frame points -> (N, 2) pixel coordinates."""
        z = points_cam[:, 2]
        u = self.fx * points_cam[:, 0] / z + self.cx
        v = self.fy * points_cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1)


def template_intrinsics(focal: float = 540.0) -> Intrinsics:
    """Default template camera: principal point at the canvas center."""
    c = TEMPLATE_SIZE / 2.0
    return Intrinsics(focal, focal, c, c)


@dataclass
class RenderResult:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), inf where nothing was drawn
    mask: np.ndarray  # (H, W) bool


class Renderer(Protocol):
    def render(
        self,
        model: ObjectModel,
        pose: Pose,
        intrinsics: Intrinsics,
        width: int,
        height: int,
    ) -> RenderResult: ...


class RenderError(RuntimeError):
    pass


class FlatRasterizer:
    """Reference software rasterizer: z-buffer, flat shading, no shadows.

    ``light_dir`` is the propagation direction of the directional light in
    the camera frame (default: from above and behind the camera).
    """

    def __init__(self, light_dir=(0.0, 0.5, 1.0), ambient_floor: float = 0.3,
                 near: float = 0.01):
        d = np.asarray(light_dir, dtype=np.float64)
        self.light_dir = d / np.linalg.norm(d)
        self.ambient_floor = float(ambient_floor)
        self.near = float(near)

    def render(self, model, pose, intrinsics, width=TEMPLATE_SIZE, height=TEMPLATE_SIZE):
        rgb = np.zeros((height, width, 3), dtype=np.float64)
        depth = np.full((height, width), np.inf, dtype=np.float64)
        owner = np.full((height, width), -1, dtype=np.int32)
        t = np.array([0.0, 0.0, pose.render_depth])
        self.raster_into(model, pose.rotation, t, intrinsics, rgb, depth, owner, 0)
        return RenderResult(rgb=rgb, depth=depth, mask=owner == 0)

    def render_objects(self, items, intrinsics, width, height, light_color=(1, 1, 1)):
        """Render several (model, rotation, translation) items into one frame.

        Returns (rgb, depth, owner) where ``owner[y, x]`` is the index of the
        item visible at that pixel, or -1.
        """
        rgb = np.zeros((height, width, 3), dtype=np.float64)
        depth = np.full((height, width), np.inf, dtype=np.float64)
        owner = np.full((height, width), -1, dtype=np.int32)
        for idx, (model, rotation, translation) in enumerate(items):
            self.raster_into(
                model, rotation, np.asarray(translation, dtype=np.float64),
                intrinsics, rgb, depth, owner, idx, light_color,
            )
        return rgb, depth, owner

    def raster_into(self, model, rotation, translation, intrinsics,
                    rgb, depth, owner, owner_index, light_color=(1, 1, 1)):
        height, width = depth.shape
        verts_cam = model.vertices @ np.asarray(rotation).T + translation
        if not np.all(np.isfinite(verts_cam)):
            raise RenderError(f"non-finite camera-space vertices for {model.object_id}")
        uv = None
        light_color = np.asarray(light_color, dtype=np.float64)

        for face, color in zip(model.faces, model.face_colors):
            tri = verts_cam[face]
            if tri[:, 2].min() <= self.near:
                continue  # behind or too close; whole-triangle reject
            if uv is None:
                # rows of rejected triangles may divide by z near 0; never read
                with np.errstate(divide="ignore", invalid="ignore"):
                    uv = intrinsics.project(verts_cam)
            pts = uv[face]

            x0 = max(int(np.floor(pts[:, 0].min() - 0.5)), 0)
            x1 = min(int(np.ceil(pts[:, 0].max() - 0.5)) + 1, width)
            y0 = max(int(np.floor(pts[:, 1].min() - 0.5)), 0)
            y1 = min(int(np.ceil(pts[:, 1].max() - 0.5)) + 1, height)
            if x0 >= x1 or y0 >= y1:
                continue

            area = _edge(pts[0], pts[1], pts[2])
            if abs(area) < 1e-12:
                continue

            xs = np.arange(x0, x1) + 0.5
            ys = np.arange(y0, y1) + 0.5
            px, py = np.meshgrid(xs, ys)
            p = np.stack([px, py], axis=-1)
            w0 = _edge(pts[1], pts[2], p) / area
            w1 = _edge(pts[2], pts[0], p) / area
            w2 = _edge(pts[0], pts[1], p) / area
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            if not inside.any():
                continue

            # linear interpolation of 1/z in screen space is perspective correct
            inv_z = w0 * (1.0 / tri[0, 2]) + w1 * (1.0 / tri[1, 2]) + w2 * (1.0 / tri[2, 2])
            z = 1.0 / np.maximum(inv_z, 1e-12)

            patch = depth[y0:y1, x0:x1]
            closer = inside & (z < patch)
            if not closer.any():
                continue

            normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            norm = np.linalg.norm(normal)
            if norm < 1e-15:
                continue
            normal /= norm
            lambert = np.clip(-np.dot(normal, self.light_dir), self.ambient_floor, 1.0)
            shaded = np.clip(color * lambert * light_color, 0.0, 1.0)

            patch[closer] = z[closer]
            rgb[y0:y1, x0:x1][closer] = shaded
            owner[y0:y1, x0:x1][closer] = owner_index


def _edge(a, b, p):
    """Signed parallelogram area of (b - a) x (p - a); broadcasts over p."""
    return (b[0] - a[0]) * (p[..., 1] - a[1]) - (b[1] - a[1]) * (p[..., 0] - a[0])


@dataclass
class Template:
    """4-channel render of an object: RGB on black plus its binary mask."""

    image: np.ndarray  # (124, 124, 4), RGB in [0, 1], mask channel binary
    pose: Pose
    render_depth: float
    object_id: str

    def __post_init__(self):
        if self.image.shape != (TEMPLATE_SIZE, TEMPLATE_SIZE, 4):
            raise ValueError(f"template image must be {TEMPLATE_SIZE}x{TEMPLATE_SIZE}x4")
        mask = self.image[:, :, 3]
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError("template mask must be binary")
        outside = self.image[:, :, :3][mask == 0.0]
        if outside.size and np.abs(outside).max() > 0.0:
            raise ValueError("template RGB must be exactly 0 outside the mask")

    @property
    def rgb(self) -> np.ndarray:
        return self.image[:, :, :3]

    @property
    def mask(self) -> np.ndarray:
        return self.image[:, :, 3]


def mask_extent(mask: np.ndarray) -> float:
    """Largest side of the mask's tight bounding box, in pixels."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return 0.0
    return float(max(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1))


def projected_extent(model: ObjectModel, rotation, depth: float,
                     intrinsics: Intrinsics) -> float:
    """Largest axis-aligned extent of the projected vertices, in pixels."""
    verts_cam = model.vertices @ np.asarray(rotation).T + np.array([0.0, 0.0, depth])
    if verts_cam[:, 2].min() <= 0.0:
        raise ValueError("object crosses the camera plane at this depth")
    uv = intrinsics.project(verts_cam)
    spans = uv.max(axis=0) - uv.min(axis=0)
    return float(spans.max())


def frame_distance(model: ObjectModel, rotation, intrinsics: Intrinsics,
                   target: float = FRAMING_TARGET) -> float:
    """Depth at which the object's largest projected extent hits ``target`` px.

    Seeds from the pinhole relation depth = f * diameter / target, then
    refines against the actual vertex projection; the result is checked to
    land inside the framing band.
    """
    f = max(intrinsics.fx, intrinsics.fy)
    d = f * model.physical_diameter / target
    for _ in range(12):
        extent = projected_extent(model, rotation, d, intrinsics)
        if extent <= 0.0:
            raise ValueError(f"model {model.object_id} has zero projected extent")
        if abs(extent - target) < 1e-9:
            break
        d *= extent / target
    extent = projected_extent(model, rotation, d, intrinsics)
    if not FRAMING_BAND[0] <= extent <= FRAMING_BAND[1]:
        raise RenderError(
            f"framing failed for {model.object_id}: extent {extent:.2f} px at depth {d:.4f} m"
        )
    return d


def render_template(renderer: Renderer, model: ObjectModel, pose: Pose,
                    intrinsics: Intrinsics | None = None) -> Template:
    """Render one 124x124 RGB+mask template at the pose's render depth."""
    intrinsics = intrinsics or template_intrinsics()
    result = renderer.render(model, pose, intrinsics, TEMPLATE_SIZE, TEMPLATE_SIZE)
    mask = result.mask.astype(np.float64)
    if mask.sum() == 0:
        raise RenderError(f"empty render for {model.object_id}")
    rgb = result.rgb * mask[:, :, None]
    image = np.concatenate([rgb, mask[:, :, None]], axis=2)
    return Template(image=image, pose=pose, render_depth=pose.render_depth,
                    object_id=model.object_id)


def make_framed_template(renderer: Renderer, model: ObjectModel, rotation,
                         intrinsics: Intrinsics | None = None) -> Template:
    """Frame the object into the band, then render the template."""
    intrinsics = intrinsics or template_intrinsics()
    depth = frame_distance(model, rotation, intrinsics)
    return render_template(renderer, model, Pose(rotation, depth), intrinsics)


def save_template(template: Template, path) -> None:
    """Persist as RGBA PNG (alpha = mask) with a JSON sidecar for the pose."""
    path = Path(path)
    rgba = np.concatenate(
        [template.rgb, template.mask[:, :, None]], axis=2
    )
    Image.fromarray((rgba * 255.0).round().astype(np.uint8)).save(path)
    meta = {
        "object_id": template.object_id,
        "render_depth": template.render_depth,
        "rotation": [round(float(v), 9) for v in template.pose.rotation.reshape(-1)],
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_template(path) -> Template:
    path = Path(path)
    rgba = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    meta = json.loads(path.with_suffix(".json").read_text())
    mask = (rgba[:, :, 3] > 0.5).astype(np.float64)
    image = np.concatenate([rgba[:, :, :3] * mask[:, :, None], mask[:, :, None]], axis=2)
    pose = Pose(np.array(meta["rotation"]).reshape(3, 3), meta["render_depth"])
    return Template(image=image, pose=pose, render_depth=meta["render_depth"],
                    object_id=meta["object_id"])
