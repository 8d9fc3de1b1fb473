"""Two-branch correlation network for template-guided detection.

One branch ingests the global template and produces a bank of tunable filters
injected residually right after the backbone's first convolution; the other
ingests a local (viewpoint-specific) template and produces 1x1 and 3x3
embeddings correlated against the backbone output. Four heads predict anchor
classification, box regression, a full-resolution mask, and a center heatmap.

The ``tiny`` backbone (group-normed, small widths) exists for tests and desk
runs; the ``reference`` configuration mirrors a 121-layer dense classifier
backbone and squeeze-style branch encoders, with optional pretrained weights.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from temdet.config import NetworkConfig, _from_dict
from temdet.rendering import TEMPLATE_SIZE, Template


def template_to_tensor(template: Template, dtype=torch.float32) -> torch.Tensor:
    """(124, 124, 4) array to a (4, 124, 124) tensor."""
    return torch.from_numpy(np.ascontiguousarray(template.image)).permute(2, 0, 1).to(dtype)


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] to a (3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).to(dtype)


def depthwise_correlate(features: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Per-sample, per-channel correlation; spatial size is preserved.

    features: (B, C, H, W); kernels: (B, C, kh, kw) with odd kh, kw.
    """
    b, c, h, w = features.shape
    kb, kc, kh, kw = kernels.shape
    if (kb, kc) != (b, c):
        raise ValueError(f"kernel bank {kernels.shape} does not match features {features.shape}")
    out = F.conv2d(
        features.reshape(1, b * c, h, w),
        kernels.reshape(b * c, 1, kh, kw),
        groups=b * c,
        padding=(kh // 2, kw // 2),
    )
    return out.reshape(b, c, h, w)


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class TinyBackbone(nn.Module):
    """Strided conv stack: 7x7 s2 stem plus one group-normed s2 conv per
    stage. The stem output stays raw so the tunable-filter injection sees
    unnormalized features; the first norm comes right after, which keeps
    activation scale independent of depth (without it the correlation stage
    receives near-constant maps and the heads collapse to base rates)."""

    def __init__(self, stem_channels: int, stage_channels: tuple[int, ...]):
        super().__init__()
        self.stem = nn.Conv2d(3, stem_channels, 7, stride=2, padding=3)
        layers: list[nn.Module] = [_group_norm(stem_channels), nn.ReLU()]
        prev = stem_channels
        for ch in stage_channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                       _group_norm(ch), nn.ReLU()]
            prev = ch
        self.rest = nn.Sequential(*layers)
        self.stem_channels = stem_channels
        self.out_channels = prev
        self.stride = 2 ** (1 + len(stage_channels))

    def corr_map_size(self, height: int, width: int) -> tuple[int, int]:
        h, w = height, width
        for _ in range(1 + int(math.log2(self.stride // 2))):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w


class ReferenceBackbone(nn.Module):
    """Stride-16 cut of a 121-layer densely connected classifier."""

    def __init__(self, pretrained_dir: str | None = None):
        super().__init__()
        import torchvision

        net = torchvision.models.densenet121(weights=None)
        if pretrained_dir:
            state = torch.load(Path(pretrained_dir) / "densenet121.pth",
                               map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        f = net.features
        self.stem = f.conv0  # 7x7 stride 2, 64 channels
        self.rest = nn.Sequential(
            f.norm0, f.relu0, f.pool0,
            f.denseblock1, f.transition1,
            f.denseblock2, f.transition2,
            f.denseblock3,
        )
        self.stem_channels = 64
        self.out_channels = 1024
        self.stride = 16

    def corr_map_size(self, height: int, width: int) -> tuple[int, int]:
        def reduce(n):
            n = (n + 1) // 2  # stem conv, k7 p3 s2
            n = (n + 1) // 2  # max pool, k3 p1 s2
            n = n // 2        # transition pool, k2 s2
            n = n // 2
            return n

        return reduce(height), reduce(width)


class TinyEncoder(nn.Module):
    """Branch encoder for 4-channel templates: group-normed s2 convs."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        layers: list[nn.Module] = []
        prev = 4
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                       _group_norm(ch), nn.ReLU()]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x):
        return self.features(x)


class ReferenceEncoder(nn.Module):
    """Squeeze-style compact encoder with the input widened to 4 channels.

    When pretrained weights are supplied the RGB slice of the first
    convolution keeps them and only the mask channel is re-initialized
    (Kaiming); otherwise everything starts from the default init.
    """

    def __init__(self, pretrained_dir: str | None = None):
        super().__init__()
        import torchvision

        net = torchvision.models.squeezenet1_1(weights=None)
        if pretrained_dir:
            state = torch.load(Path(pretrained_dir) / "squeezenet1_1.pth",
                               map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        first = net.features[0]
        conv4 = nn.Conv2d(4, first.out_channels, kernel_size=first.kernel_size,
                          stride=first.stride, padding=first.padding)
        with torch.no_grad():
            conv4.weight[:, :3] = first.weight
            nn.init.kaiming_normal_(conv4.weight[:, 3:4], mode="fan_in",
                                    nonlinearity="relu")
            conv4.bias.copy_(first.bias)
        net.features[0] = conv4
        self.features = net.features
        self.out_channels = 512

    def forward(self, x):
        return self.features(x)


class ObjectAttentionBranch(nn.Module):
    def __init__(self, encoder: nn.Module, filter_size: int, filter_channels: int):
        super().__init__()
        self.encoder = encoder
        self.pool = nn.AdaptiveAvgPool2d(filter_size)
        self.project = nn.Conv2d(encoder.out_channels, filter_channels, 1)

    def forward(self, templates: torch.Tensor) -> torch.Tensor:
        return self.project(self.pool(self.encoder(templates)))


class PoseSpecificBranch(nn.Module):
    def __init__(self, encoder: nn.Module, embed_channels: int):
        super().__init__()
        self.encoder = encoder
        self.pool1 = nn.AdaptiveAvgPool2d(1)
        self.pool3 = nn.AdaptiveAvgPool2d(3)
        self.project1 = nn.Conv2d(encoder.out_channels, embed_channels, 1)
        self.project3 = nn.Conv2d(encoder.out_channels, embed_channels, 1)

    def forward(self, templates: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.encoder(templates)
        return self.project1(self.pool1(f)), self.project3(self.pool3(f))


def _conv_head(in_channels: int, width: int, depth: int, out_channels: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_channels
    for _ in range(depth - 1):
        layers += [nn.Conv2d(prev, width, 3, padding=1), _group_norm(width),
                   nn.ReLU()]
        prev = width
    layers.append(nn.Conv2d(prev, out_channels, 3, padding=1))
    return nn.Sequential(*layers)


class SegmentationHead(nn.Module):
    """Conv stack with two 2x bilinear upsamplings, finished by a resize to
    the query resolution so the mask logits are full-res."""

    def __init__(self, in_channels: int, width: int, depth: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_channels
        for i in range(depth - 1):
            layers += [nn.Conv2d(prev, width, 3, padding=1),
                       _group_norm(width), nn.ReLU()]
            prev = width
            if i < 2:
                layers.append(nn.Upsample(scale_factor=2, mode="bilinear",
                                          align_corners=False))
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.stack = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        y = self.stack(x)
        if y.shape[-2:] != out_hw:
            y = F.interpolate(y, size=out_hw, mode="bilinear", align_corners=False)
        return y


class CorrelationNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone == "tiny":
            self.backbone = TinyBackbone(cfg.stem_channels, cfg.stage_channels)
            oab_enc = TinyEncoder(cfg.encoder_channels)
            psb_enc = TinyEncoder(cfg.encoder_channels)
        else:
            self.backbone = ReferenceBackbone(cfg.pretrained_dir)
            oab_enc = ReferenceEncoder(cfg.pretrained_dir)
            psb_enc = ReferenceEncoder(cfg.pretrained_dir)
        if self.backbone.stride != cfg.stride:
            raise ValueError(
                f"backbone stride {self.backbone.stride} != configured {cfg.stride}"
            )
        feat_ch = self.backbone.out_channels
        self.oab = ObjectAttentionBranch(oab_enc, cfg.filter_size,
                                         self.backbone.stem_channels)
        self.psb = PoseSpecificBranch(psb_enc, feat_ch)
        pw = cfg.path_width
        self.c1 = nn.Sequential(nn.Conv2d(feat_ch, pw, 3, padding=1),
                                _group_norm(pw), nn.ReLU())
        self.c2 = nn.Sequential(nn.Conv2d(feat_ch, pw, 3, padding=1),
                                _group_norm(pw), nn.ReLU())
        self.c3 = nn.Sequential(nn.Conv2d(feat_ch, pw, 3, padding=1),
                                _group_norm(pw), nn.ReLU())
        k = cfg.anchors_per_cell
        self.cls_head = _conv_head(3 * pw, cfg.head_width, cfg.head_depth, k)
        self.reg_head = _conv_head(3 * pw, cfg.head_width, cfg.head_depth, 4 * k)
        self.seg_head = SegmentationHead(3 * pw, cfg.head_width, cfg.head_depth)
        self.center_head = nn.Conv2d(3 * pw, 1, 1)
        # start the classifier at a 1% foreground prior; a 0.5 prior makes the
        # first focal-loss steps crush every logit, after which positives take
        # thousands of iterations to climb back
        nn.init.constant_(self.cls_head[-1].bias,
                          -math.log((1.0 - 0.01) / 0.01))

    def oab_forward(self, global_templates: torch.Tensor) -> torch.Tensor:
        self._check_template(global_templates)
        return self.oab(global_templates)

    def psb_forward(self, local_templates: torch.Tensor):
        self._check_template(local_templates)
        return self.psb(local_templates)

    def backbone_forward(self, images: torch.Tensor, filters: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        f0 = self.backbone.stem(images)
        f0 = f0 + depthwise_correlate(f0, filters)
        return self.backbone.rest(f0)

    @staticmethod
    def correlation_paths(features, e1, e3):
        """The three raw paths before C1-C3: 1x1 corr, 3x3 corr, subtraction."""
        if e1.shape[1] != features.shape[1] or e3.shape[1] != features.shape[1]:
            raise ValueError("embedding channels do not match feature channels")
        p1 = features * e1
        p3 = depthwise_correlate(features, e3)
        ps = features - e1
        return p1, p3, ps

    def correlate(self, features, e1, e3) -> torch.Tensor:
        p1, p3, ps = self.correlation_paths(features, e1, e3)
        return torch.cat([self.c1(p1), self.c2(p3), self.c3(ps)], dim=1)

    def cls_reg_forward(self, corr: torch.Tensor):
        return self.cls_head(corr), self.reg_head(corr)

    def heads_forward(self, corr: torch.Tensor, image_hw: tuple[int, int]) -> dict:
        cls, reg = self.cls_reg_forward(corr)
        return {
            "cls": cls,
            "reg": reg,
            "seg": self.seg_head(corr, image_hw),
            "center": self.center_head(corr),
        }

    def forward(self, images, global_templates, local_templates) -> dict:
        filters = self.oab_forward(global_templates)
        features = self.backbone_forward(images, filters)
        e1, e3 = self.psb_forward(local_templates)
        corr = self.correlate(features, e1, e3)
        return self.heads_forward(corr, images.shape[-2:])

    @staticmethod
    def _check_template(t: torch.Tensor) -> None:
        if t.ndim != 4 or t.shape[1:] != (4, TEMPLATE_SIZE, TEMPLATE_SIZE):
            raise ValueError(
                f"expected (B, 4, {TEMPLATE_SIZE}, {TEMPLATE_SIZE}) templates, "
                f"got {tuple(t.shape)}"
            )


def flatten_cls(cls: torch.Tensor) -> torch.Tensor:
    """(B, k, H, W) logits to (B, H*W*k) in anchor-grid flat order."""
    b = cls.shape[0]
    return cls.permute(0, 2, 3, 1).reshape(b, -1)


def flatten_reg(reg: torch.Tensor, k: int) -> torch.Tensor:
    """(B, 4k, H, W) offsets to (B, H*W*k, 4) in anchor-grid flat order."""
    b, _, h, w = reg.shape
    return reg.reshape(b, k, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: CorrelationNet, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "network": dataclasses.asdict(model.cfg),
        "state": model.state_dict(),
    }
    if extra:
        overlap = set(extra) & set(payload)
        if overlap:
            raise ValueError(f"extra keys collide with checkpoint fields: {overlap}")
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[CorrelationNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = _from_dict(NetworkConfig, payload["network"])
    # weights are restored from the checkpoint, never refetched
    cfg = dataclasses.replace(cfg, pretrained_dir=None)
    model = CorrelationNet(cfg)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload
