"""Shared convolutional backbone and FPN/PAN neck."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class ModelScale:
    """Width/depth profile. ``neck_dims`` and ``hidden_dim`` are independent knobs."""

    name: str = "N"
    backbone_widths: tuple[int, ...] = (8, 16, 32, 64, 128)  # stem, s4, s8, s16, s32
    blocks_per_stage: int = 2
    neck_dims: tuple[int, int, int] = (64, 128, 128)
    hidden_dim: int = 64
    decoder_layers: int = 3
    num_queries: int = 60
    num_heads: int = 4
    ffn_dim: int = 256
    head_dim: int = 32  # width of the dense head branches

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim must be a positive multiple of num_heads, got {self.hidden_dim}")
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")
        if len(self.neck_dims) != 3 or min(self.neck_dims) <= 0:
            raise ValueError(f"neck_dims must be three positive widths, got {self.neck_dims}")
        if len(self.backbone_widths) != 5 or min(self.backbone_widths) <= 0:
            raise ValueError(f"backbone_widths must be five positive widths, got {self.backbone_widths}")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelScale":
        d = dict(d)
        for k in ("backbone_widths", "neck_dims"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


PROFILES = {
    "N": ModelScale(),
    "L": ModelScale(name="L", backbone_widths=(16, 32, 64, 128, 256), neck_dims=(128, 256, 256), hidden_dim=128),
    # hidden width and depth of the full-size decoder
    "full": ModelScale(name="full", backbone_widths=(16, 32, 64, 128, 256), neck_dims=(64, 128, 256),
                       hidden_dim=256, decoder_layers=6, num_queries=300, num_heads=8, ffn_dim=1024),
}


def get_scale(name_or_scale) -> ModelScale:
    if isinstance(name_or_scale, ModelScale):
        return name_or_scale
    if isinstance(name_or_scale, dict):
        return ModelScale.from_dict(name_or_scale)
    try:
        return PROFILES[name_or_scale]
    except KeyError:
        raise ValueError(f"unknown model scale {name_or_scale!r}; known: {sorted(PROFILES)}") from None


def check_image_size(h: int, w: int) -> None:
    if h % STRIDES[-1] or w % STRIDES[-1]:
        raise ValueError(f"image size {h}x{w} is not divisible by {STRIDES[-1]}")


class ConvBNAct(nn.Sequential):
    def __init__(self, cin, cout, k=3, s=1):
        super().__init__(
            nn.Conv2d(cin, cout, k, s, k // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.SiLU(),
        )


class Bottleneck(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.reduce = ConvBNAct(c, max(c // 2, 1), 1)
        self.conv = ConvBNAct(max(c // 2, 1), c, 3)

    def forward(self, x):
        return x + self.conv(self.reduce(x))


class Stage(nn.Sequential):
    def __init__(self, cin, cout, blocks):
        super().__init__(ConvBNAct(cin, cout, 3, 2), *[Bottleneck(cout) for _ in range(blocks)])


class Backbone(nn.Module):
    """Stem plus four stride-2 stages; returns C3, C4, C5 at strides 8/16/32."""

    def __init__(self, scale: ModelScale):
        super().__init__()
        w, n = scale.backbone_widths, scale.blocks_per_stage
        self.stem = ConvBNAct(3, w[0], 3, 2)
        self.stage2 = Stage(w[0], w[1], n)
        self.stage3 = Stage(w[1], w[2], n)
        self.stage4 = Stage(w[2], w[3], n)
        self.stage5 = Stage(w[3], w[4], n)
        self.out_channels = tuple(w[2:])

    def forward(self, x):
        check_image_size(x.shape[-2], x.shape[-1])
        x = self.stage2(self.stem(x))
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


class Fuse(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(ConvBNAct(cin, cout, 1), Bottleneck(cout))


class Neck(nn.Module):
    """Top-down FPN followed by bottom-up PAN; output widths are ``neck_dims``."""

    def __init__(self, in_channels, neck_dims):
        super().__init__()
        c3, c4, c5 = in_channels
        n3, n4, n5 = neck_dims
        self.in_channels = tuple(in_channels)
        self.top_down4 = Fuse(c5 + c4, n4)
        self.top_down3 = Fuse(n4 + c3, n3)
        self.down3 = ConvBNAct(n3, n3, 3, 2)
        self.bottom_up4 = Fuse(n3 + n4, n4)
        self.down4 = ConvBNAct(n4, n4, 3, 2)
        self.bottom_up5 = Fuse(n4 + c5, n5)

    def forward(self, c3, c4, c5):
        got = (c3.shape[1], c4.shape[1], c5.shape[1])
        if got != self.in_channels:
            raise ValueError(f"neck expects channels {self.in_channels}, got {got}")
        t4 = self.top_down4(torch.cat([F.interpolate(c5, scale_factor=2.0, mode="nearest"), c4], 1))
        p3 = self.top_down3(torch.cat([F.interpolate(t4, scale_factor=2.0, mode="nearest"), c3], 1))
        p4 = self.bottom_up4(torch.cat([self.down3(p3), t4], 1))
        p5 = self.bottom_up5(torch.cat([self.down4(p4), c5], 1))
        return FeaturePyramid(p3, p4, p5)


@dataclass
class FeaturePyramid:
    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor
    strides: tuple[int, int, int] = field(default=STRIDES)

    def maps(self):
        return (self.p3, self.p4, self.p5)


def build_backbone_neck(scale: ModelScale) -> tuple[Backbone, Neck]:
    backbone = Backbone(scale)
    return backbone, Neck(backbone.out_channels, scale.neck_dims)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
