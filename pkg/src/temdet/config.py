"""Dataclass configuration tree with YAML round-trip and content hashing.

Every tunable lives here. ``RunConfig`` is the root handed to the CLI; the
``desk`` preset runs a full pipeline in minutes on a laptop CPU while ``full``
matches the reference training recipe.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from temdet.augment import AugmentConfig
from temdet.boxes import DEFAULT_RATIOS, DEFAULT_SCALES
from temdet.scenes import SceneConfig


@dataclass
class NetworkConfig:
    backbone: str = "tiny"  # "tiny" or "reference"
    stem_channels: int = 8  # channels at the tunable-filter injection point
    stage_channels: tuple[int, ...] = (16, 24, 32)
    encoder_channels: tuple[int, ...] = (16, 24)  # branch encoder widths (tiny)
    path_width: int = 16  # per-correlation-path channels after C1..C3
    head_width: int = 16
    head_depth: int = 5
    filter_size: int = 3
    stride: int = 16
    scales: tuple[float, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    pretrained_dir: str | None = None  # optional weight files for "reference"

    def __post_init__(self):
        if self.backbone not in ("tiny", "reference"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.head_depth < 2:
            raise ValueError("head_depth must be at least 2")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    @classmethod
    def reference(cls, pretrained_dir: str | None = None) -> "NetworkConfig":
        # stride-16 cut of a 121-layer dense classifier; widths below match
        # its stem (64) and third dense block output (1024)
        return cls(backbone="reference", stem_channels=64, stage_channels=(1024,),
                   path_width=256, head_width=256, head_depth=5,
                   pretrained_dir=pretrained_dir)

    @classmethod
    def micro(cls) -> "NetworkConfig":
        """Smallest config that exercises every code path; used for the
        finite-difference gradient check, so parameter count stays low."""
        return cls(stem_channels=8, stage_channels=(8, 8, 8),
                   encoder_channels=(8, 8), path_width=4, head_width=4,
                   head_depth=2, scales=(30.0, 60.0))


@dataclass
class LossConfig:
    lambda_seg: float = 20.0
    lambda_center: float = 20.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_beta: float = 1.0
    heatmap_variance: float = 5.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def __post_init__(self):
        for name in ("lambda_seg", "lambda_center", "focal_gamma", "focal_alpha",
                     "smooth_l1_beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError("need 0 < neg_iou <= pos_iou <= 1")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    amsgrad: bool = True
    batch_size: int = 6
    epochs: int = 50
    iters_per_epoch: int = 1300
    lr_milestones: tuple[int, ...] = (20, 40)
    lr_decay: float = 0.1
    seed: int = 0
    val_batches: int = 8
    perturb_deg: float = 20.0  # local template orientation jitter, degrees


@dataclass
class DataConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    n_train_scenes: int = 200
    n_val_scenes: int = 20
    tabletop_ratio: float = 0.8
    objects: tuple[str, ...] = ("box", "cylinder", "sphere")


@dataclass
class InferConfig:
    n_inplane: int = 10  # local template stack: 16 viewpoints x n_inplane
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    depth_range: tuple[float, float] = (0.4, 2.0)
    depth_filter: bool = True
    depth_filter_before_nms: bool = True
    template_batch: int = 32
    max_per_template: int = 20


@dataclass
class RunConfig:
    name: str = "run"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)


def _coerce(hint, value):
    if value is None:
        return None
    if dataclasses.is_dataclass(hint) and isinstance(value, dict):
        return _from_dict(hint, value)
    origin = typing.get_origin(hint)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v) for v in value)
        return tuple(_coerce(a, v) for a, v in zip(args, value))
    if origin is typing.Union:
        for arg in typing.get_args(hint):
            if arg is type(None):
                continue
            return _coerce(arg, value)
    return value


def _from_dict(cls, data: dict):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**{k: _coerce(hints[k], v) for k, v in data.items()})


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def save_config(cfg: RunConfig, path) -> None:
    text = yaml.safe_dump(_plain(config_to_dict(cfg)), sort_keys=True)
    Path(path).write_text(text)


def load_config(path) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text())
    return config_from_dict(data or {})


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_hash(cfg: RunConfig) -> str:
    text = json.dumps(_plain(config_to_dict(cfg)), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:10]


def desk_config() -> RunConfig:
    """Small-everything profile: tiny backbone, 320x256 scenes, short epochs.

    The scene camera reuses the template focal length (540 px) so objects at
    arm's-length depths project to 25-120 px, a range the anchor scales below
    actually cover at stride 16, and so box-size depth estimates stay
    calibrated. The depth band is wider than the reference one because these
    small objects span a larger aspect range across views.
    """
    return RunConfig(
        name="desk",
        network=NetworkConfig(scales=(24.0, 36.0, 54.0, 80.0, 112.0)),
        train=TrainConfig(batch_size=4, epochs=4, iters_per_epoch=50,
                          lr_milestones=(2, 3), val_batches=2),
        data=DataConfig(
            scene=SceneConfig(width=320, height=256, focal=540.0,
                              table_extent=0.22, table_size=1.2,
                              min_visible_px=150),
            n_train_scenes=40,
            n_val_scenes=8,
        ),
        infer=InferConfig(n_inplane=5, depth_range=(0.4, 3.0)),
    )


def full_config() -> RunConfig:
    """Reference recipe: dense backbone at 640x480, 50 epochs."""
    return RunConfig(
        name="full",
        network=NetworkConfig.reference(),
        train=TrainConfig(),
        data=DataConfig(n_train_scenes=5000, n_val_scenes=200),
        infer=InferConfig(),
    )
