"""Toy segmentation networks: a single-scale CNN and a four-stage pyramid CNN."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import tensor as T
from .layers import Conv2d

IGNORE_INDEX = T.IGNORE_INDEX


@dataclass
class SegModelConfig:
    kind: str = "single"  # single | multi
    num_classes: int = 4
    in_channels: int = 3
    width: int = 32  # single-scale feature channels
    stage_widths: list = field(default_factory=lambda: [16, 24, 32, 48])
    decoder_dim: int = 32


def _check_divisible(x, divisor):
    h, w = x.shape[-2:]
    if h % divisor or w % divisor:
        raise ValueError(f"input extents {h}×{w} must be divisible by {divisor}")


class SegModelSingle(nn.Module):
    """Encoder at 1/8 resolution, 1×1 classifier, bilinear upsample."""

    def __init__(self, num_classes=4, in_channels=3, width=32):
        super().__init__()
        self.num_classes = num_classes
        self.feature_channels = width
        half = max(width // 2, 8)
        self.encoder = nn.ModuleList([
            Conv2d(in_channels, half, 3, stride=2, padding=1),
            Conv2d(half, half, 3, stride=1, padding=1),
            Conv2d(half, width, 3, stride=2, padding=1),
            Conv2d(width, width, 3, stride=1, padding=1),
            Conv2d(width, width, 3, stride=2, padding=1),
            Conv2d(width, width, 3, stride=1, padding=1),
        ])
        self.decoder = nn.ModuleDict({"cls": Conv2d(width, num_classes, 1)})

    def feature_shape(self, image_size):
        h, w = image_size
        return (self.feature_channels, h // 8, w // 8)

    stride = 8

    def encode(self, x):
        _check_divisible(x, self.stride)
        for i, conv in enumerate(self.encoder):
            x = conv(x)
            # last layer stays linear so features can be negative, like a backbone output
            if i < len(self.encoder) - 1:
                x = T.relu(x)
        return x

    def decode(self, features, out_size=None):
        if features.dim() != 4 or features.shape[1] != self.feature_channels:
            raise ValueError(f"decoder expects {self.feature_channels} channels, got shape "
                             f"{tuple(features.shape)}")
        logits = self.decoder["cls"](features)
        if out_size is None:
            out_size = (features.shape[-2] * 8, features.shape[-1] * 8)
        return T.bilinear_resize(logits, out_size)

    def forward(self, x):
        return self.decode(self.encode(x), x.shape[-2:])


class SegModelMulti(nn.Module):
    """Four stages at 1/4, 1/8, 1/16, 1/32 with an all-MLP style decoder.

    The decoder projects each stage with a 1×1 conv, aligns to the 1/4 grid
    and sums. Summing per-stage 1×1 projections is the same linear map as
    concatenating and applying a 1×1 fuse conv, but uses only ``add``.
    """

    def __init__(self, num_classes=4, in_channels=3, stage_widths=(16, 24, 32, 48), decoder_dim=32):
        super().__init__()
        if len(stage_widths) != 4:
            raise ValueError("exactly four stage widths are required")
        self.num_classes = num_classes
        self.stage_channels = list(stage_widths)
        w = self.stage_channels
        self.encoder = nn.ModuleDict({
            "stem": nn.ModuleList([
                Conv2d(in_channels, w[0], 3, stride=2, padding=1),
                Conv2d(w[0], w[0], 3, stride=2, padding=1),
            ]),
            "stages": nn.ModuleList(
                [Conv2d(w[0], w[0], 3, stride=1, padding=1)]
                + [Conv2d(w[i - 1], w[i], 3, stride=2, padding=1) for i in range(1, 4)]
            ),
        })
        self.decoder = nn.ModuleDict({
            "proj": nn.ModuleList([Conv2d(c, decoder_dim, 1) for c in w]),
            "fuse": Conv2d(decoder_dim, decoder_dim, 1),
            "cls": Conv2d(decoder_dim, num_classes, 1),
        })

    def feature_shape(self, image_size):
        h, w = image_size
        return [(c, h // s, w // s) for c, s in zip(self.stage_channels, (4, 8, 16, 32))]

    stride = 32

    def encode(self, x):
        _check_divisible(x, self.stride)
        for conv in self.encoder["stem"]:
            x = T.relu(conv(x))
        feats = []
        for conv in self.encoder["stages"]:
            x = conv(x)
            feats.append(x)
            x = T.relu(x)
        return feats

    def decode(self, features, out_size=None):
        if len(features) != 4:
            raise ValueError(f"decoder expects 4 stages, got {len(features)}")
        for f, c in zip(features, self.stage_channels):
            if f.shape[1] != c:
                raise ValueError(f"decoder expects stage channels {self.stage_channels}, "
                                 f"got {[tuple(g.shape) for g in features]}")
        size = tuple(features[0].shape[-2:])
        fused = None
        for f, proj in zip(features, self.decoder["proj"]):
            y = T.bilinear_resize(proj(T.relu(f)), size)
            fused = y if fused is None else T.add(fused, y)
        fused = T.relu(self.decoder["fuse"](fused))
        logits = self.decoder["cls"](fused)
        if out_size is None:
            out_size = (size[0] * 4, size[1] * 4)
        return T.bilinear_resize(logits, out_size)

    def forward(self, x):
        return self.decode(self.encode(x), x.shape[-2:])


def build_segmodel(cfg: SegModelConfig):
    if cfg.kind == "single":
        return SegModelSingle(cfg.num_classes, cfg.in_channels, cfg.width)
    if cfg.kind == "multi":
        return SegModelMulti(cfg.num_classes, cfg.in_channels, cfg.stage_widths, cfg.decoder_dim)
    raise ValueError(f"unknown model kind {cfg.kind!r}")


def supervised_loss(logits, labels):
    """Mean pixel-wise cross-entropy over non-ignored pixels (0 if none)."""
    if logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ spatially")
    return T.cross_entropy_with_ignore(logits, labels, IGNORE_INDEX)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
