"""Probability-gated augmentation for scene images, labels, and templates.

Every component applies with its own probability; setting all probabilities to
zero makes ``augment`` an exact identity. Geometry transforms (flips, shift,
scale) update masks, boxes, and projected centers consistently; photometric
transforms leave labels untouched. The template keeps its black background
throughout because color jitter is re-masked after each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from matplotlib import colors as mcolors
from scipy import ndimage

from temdet.boxes import BBox
from temdet.rendering import Template
from temdet.scenes import SceneObject, SceneSample


@dataclass
class AugmentConfig:
    object_color_prob: float = 0.5
    hue_delta: float = 0.08
    saturation_range: tuple[float, float] = (0.6, 1.4)
    value_range: tuple[float, float] = (0.7, 1.3)
    global_brightness_prob: float = 0.5
    global_brightness_delta: float = 0.15
    blur_prob: float = 0.3
    blur_sigma: tuple[float, float] = (0.3, 1.5)
    noise_prob: float = 0.3
    noise_std: float = 0.02
    hflip_prob: float = 0.5
    vflip_prob: float = 0.2
    translate_prob: float = 0.3
    max_translate_frac: float = 0.1
    scale_prob: float = 0.3
    scale_range: tuple[float, float] = (0.85, 1.15)
    global_hue_prob: float = 0.5
    motion_blur_prob: float = 0.2
    motion_blur_length: tuple[int, int] = (5, 13)

    @classmethod
    def none(cls) -> "AugmentConfig":
        """All-zero probabilities: every sample passes through unchanged.
        Handy for overfit sanity runs and for isolating pipeline bugs."""
        return cls(object_color_prob=0.0, global_brightness_prob=0.0,
                   blur_prob=0.0, noise_prob=0.0, hflip_prob=0.0,
                   vflip_prob=0.0, translate_prob=0.0, scale_prob=0.0,
                   global_hue_prob=0.0, motion_blur_prob=0.0)

    def __post_init__(self):
        for name in (
            "object_color_prob", "global_brightness_prob", "blur_prob",
            "noise_prob", "hflip_prob", "vflip_prob", "translate_prob",
            "scale_prob", "global_hue_prob", "motion_blur_prob",
        ):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(
            object_color_prob=0.0, global_brightness_prob=0.0, blur_prob=0.0,
            noise_prob=0.0, hflip_prob=0.0, vflip_prob=0.0, translate_prob=0.0,
            scale_prob=0.0, global_hue_prob=0.0, motion_blur_prob=0.0,
        )


def _shift_hsv(rgb: np.ndarray, dh: float, sat: float, val: float) -> np.ndarray:
    hsv = mcolors.rgb_to_hsv(np.clip(rgb, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * val, 0.0, 1.0)
    return mcolors.hsv_to_rgb(hsv)


def _jitter_template(template: Template, dh, sat, val) -> Template:
    image = template.image.copy()
    image[:, :, :3] = _shift_hsv(image[:, :, :3], dh, sat, val)
    image[:, :, :3][image[:, :, 3] == 0.0] = 0.0  # keep the background exact
    return replace(template, image=image)


def _bbox_from_mask(mask: np.ndarray) -> BBox | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _shift2d(arr: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    out = np.full_like(arr, fill)
    h, w = arr.shape[:2]
    src_y = slice(max(0, -dy), min(h, h - dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def _scale_about_center(arr: np.ndarray, s: float, order: int) -> np.ndarray:
    # output index o samples input index c + (o - c) / s, c = (n - 1) / 2
    h, w = arr.shape[:2]
    matrix = np.diag([1.0 / s, 1.0 / s])
    offset = np.array([(h - 1) / 2.0, (w - 1) / 2.0]) * (1.0 - 1.0 / s)
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, matrix, offset=offset, order=order,
                                        mode="constant", cval=0.0)
    return np.stack(
        [
            ndimage.affine_transform(arr[:, :, c], matrix, offset=offset,
                                     order=order, mode="constant", cval=0.0)
            for c in range(arr.shape[2])
        ],
        axis=2,
    )


def _motion_kernel(length: int, angle: float) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    for t in np.linspace(-c, c, 4 * length):
        x = int(round(c + t * math.cos(angle)))
        y = int(round(c + t * math.sin(angle)))
        k[y, x] = 1.0
    return k / k.sum()


def _rebuild_objects(objects, masks, centers):
    out = []
    for obj, mask, center in zip(objects, masks, centers):
        bbox = _bbox_from_mask(mask)
        if bbox is None:
            return None
        out.append(replace(obj, visibility_mask=mask, bbox=bbox,
                           projected_center=center))
    return out


def augment(sample: SceneSample, template: Template, cfg: AugmentConfig,
            rng: np.random.Generator, target_index: int = 0):
    """Return augmented copies of the scene and the target's template.

    The target object (``sample.objects[target_index]``) receives the
    object-plus-template color jitter; geometric transforms update every
    object's labels. Inputs are never mutated.
    """
    if not 0 <= target_index < len(sample.objects):
        raise ValueError(f"target index {target_index} out of range")
    image = sample.image.copy()
    height, width = image.shape[:2]
    masks = [obj.visibility_mask.copy() for obj in sample.objects]
    centers = [obj.projected_center.astype(np.float64).copy() for obj in sample.objects]
    objects = list(sample.objects)

    # color jitter on the target object's pixels and, independently drawn
    # from the same ranges, on its template
    if rng.uniform() < cfg.object_color_prob:
        tgt = masks[target_index]
        dh = rng.uniform(-cfg.hue_delta, cfg.hue_delta)
        sat = rng.uniform(*cfg.saturation_range)
        val = rng.uniform(*cfg.value_range)
        image[tgt] = _shift_hsv(image[tgt], dh, sat, val)
        template = _jitter_template(
            template,
            rng.uniform(-cfg.hue_delta, cfg.hue_delta),
            rng.uniform(*cfg.saturation_range),
            rng.uniform(*cfg.value_range),
        )

    # shared hue rotation over the whole image and the template
    if rng.uniform() < cfg.global_hue_prob:
        dh = rng.uniform(0.0, 1.0)
        image = _shift_hsv(image, dh, 1.0, 1.0)
        template = _jitter_template(template, dh, 1.0, 1.0)

    if rng.uniform() < cfg.hflip_prob:
        image = image[:, ::-1].copy()
        masks = [m[:, ::-1].copy() for m in masks]
        objects = [
            replace(o, bbox=BBox(width - o.bbox.x_max, o.bbox.y_min,
                                 width - o.bbox.x_min, o.bbox.y_max))
            for o in objects
        ]
        for c in centers:
            c[0] = width - c[0]

    if rng.uniform() < cfg.vflip_prob:
        image = image[::-1].copy()
        masks = [m[::-1].copy() for m in masks]
        objects = [
            replace(o, bbox=BBox(o.bbox.x_min, height - o.bbox.y_max,
                                 o.bbox.x_max, height - o.bbox.y_min))
            for o in objects
        ]
        for c in centers:
            c[1] = height - c[1]

    if rng.uniform() < cfg.translate_prob:
        dx = int(rng.integers(-int(cfg.max_translate_frac * width),
                              int(cfg.max_translate_frac * width) + 1))
        dy = int(rng.integers(-int(cfg.max_translate_frac * height),
                              int(cfg.max_translate_frac * height) + 1))
        new_masks = [_shift2d(m, dy, dx, False) for m in masks]
        if all(m.any() for m in new_masks):
            image = _shift2d(image, dy, dx, 0.0)
            masks = new_masks
            for c in centers:
                c += (dx, dy)
            rebuilt = _rebuild_objects(objects, masks, centers)
            if rebuilt is not None:
                objects = rebuilt

    if rng.uniform() < cfg.scale_prob:
        s = rng.uniform(*cfg.scale_range)
        new_masks = [_scale_about_center(m.astype(np.uint8), s, order=0) > 0
                     for m in masks]
        rebuilt = None
        if all(m.any() for m in new_masks):
            new_centers = []
            for c in centers:
                mid = np.array([width / 2.0, height / 2.0])
                new_centers.append(mid + s * (c - mid))
            rebuilt = _rebuild_objects(objects, new_masks, new_centers)
        if rebuilt is not None:
            image = np.clip(_scale_about_center(image, s, order=1), 0.0, 1.0)
            masks = new_masks
            centers = new_centers
            objects = rebuilt
        # else object scaled out of frame: skip this component

    # make boxes consistent with the (possibly resampled) masks
    rebuilt = _rebuild_objects(objects, masks, centers)
    if rebuilt is None:
        raise RuntimeError("augmentation produced an empty visibility mask")
    objects = rebuilt

    if rng.uniform() < cfg.global_brightness_prob:
        image = np.clip(
            image + rng.uniform(-cfg.global_brightness_delta, cfg.global_brightness_delta),
            0.0, 1.0,
        )

    if rng.uniform() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        image = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0.0))

    if rng.uniform() < cfg.noise_prob:
        image = np.clip(image + rng.normal(0.0, cfg.noise_std, size=image.shape), 0.0, 1.0)

    if rng.uniform() < cfg.motion_blur_prob:
        length = int(rng.integers(cfg.motion_blur_length[0], cfg.motion_blur_length[1] + 1))
        kernel = _motion_kernel(max(3, length | 1), rng.uniform(0.0, math.pi))
        image = np.stack(
            [ndimage.convolve(image[:, :, c], kernel, mode="nearest") for c in range(3)],
            axis=2,
        )

    out = SceneSample(image=image, objects=objects, style=sample.style,
                      camera_position=sample.camera_position)
    return out, template
