"""Convolutional feature extractor producing stride-4/8/16 feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import torch
import torch.nn as nn
import torch.nn.functional as F

LEVEL_STRIDES = {"low": 4, "mid": 8, "deep": 16}


@dataclass
class FeatureMap:
    values: torch.Tensor  # N x C x h x w
    stride: int
    level: str

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(gcd(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.norm1 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.norm2 = group_norm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                                          group_norm(out_ch))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Backbone(nn.Module):
    """Three-stage residual network.

    The stem downsamples by 4 and yields the ``low`` level; each further stage
    halves the resolution, yielding ``mid`` (stride 8) and ``deep`` (stride 16).
    """

    def __init__(self, widths: tuple[int, int, int] = (32, 64, 256), in_channels: int = 3):
        super().__init__()
        w_low, w_mid, w_deep = widths
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w_low // 2, 3, 2, 1, bias=False), group_norm(w_low // 2),
            nn.ReLU(),
            nn.Conv2d(w_low // 2, w_low, 3, 2, 1, bias=False), group_norm(w_low), nn.ReLU(),
            ResidualBlock(w_low, w_low),
        )
        self.stage_mid = ResidualBlock(w_low, w_mid, stride=2)
        self.stage_deep = nn.Sequential(ResidualBlock(w_mid, w_deep, stride=2),
                                        ResidualBlock(w_deep, w_deep))

    @property
    def out_channels(self) -> dict[str, int]:
        return dict(zip(("low", "mid", "deep"), self.widths))

    def forward(self, pixels: torch.Tensor) -> dict[str, torch.Tensor]:
        low = self.stem(pixels - 0.5)
        mid = self.stage_mid(low)
        deep = self.stage_deep(mid)
        return {"low": low, "mid": mid, "deep": deep}


class FeatureAdapter(nn.Module):
    """Wrap a foreign feature extractor behind the ``Backbone`` contract.

    ``module`` must map ``B x 3 x S x S`` images to a dict with ``low``, ``mid``
    and ``deep`` tensors at strides 4, 8 and 16. Each level is projected with
    a 1x1 convolution to the requested widths, so e.g. a pretrained ResNet
    can replace the default network without touching downstream modules.
    """

    def __init__(self, module: nn.Module, in_widths: tuple[int, int, int],
                 widths: tuple[int, int, int] = (32, 64, 256)):
        super().__init__()
        self.module = module
        self.widths = tuple(widths)
        self.proj = nn.ModuleDict({
            name: nn.Conv2d(cin, cout, 1)
            for name, cin, cout in zip(("low", "mid", "deep"), in_widths, widths)
        })

    @property
    def out_channels(self) -> dict[str, int]:
        return dict(zip(("low", "mid", "deep"), self.widths))

    def forward(self, pixels):
        feats = self.module(pixels)
        return {k: self.proj[k](feats[k]) for k in ("low", "mid", "deep")}


def extract(backbone: nn.Module, pixels: torch.Tensor) -> dict[str, FeatureMap]:
    """Run ``backbone`` on ``B x 3 x S x S`` pixels and tag each level with its stride."""
    size = pixels.shape[-1]
    if pixels.shape[-2] != size or size % 16:
        raise ValueError(f"input must be square with side divisible by 16, got "
                         f"{tuple(pixels.shape[-2:])}")
    feats = backbone(pixels)
    out = {}
    for level, stride in LEVEL_STRIDES.items():
        v = feats[level]
        if v.shape[-1] != size // stride or v.shape[-2] != size // stride:
            raise ValueError(f"{level} features have spatial size {tuple(v.shape[-2:])}, "
                             f"expected {size // stride} for stride {stride}")
        out[level] = FeatureMap(v, stride, level)
    return out


def pooled_descriptor(fm: FeatureMap | torch.Tensor) -> torch.Tensor:
    """Global-average-pool then L2-normalize; an all-zero map gives a zero vector."""
    values = fm.values if isinstance(fm, FeatureMap) else fm
    pooled = values.mean(dim=(-2, -1))
    norm = pooled.norm(dim=-1, keepdim=True)
    return torch.where(norm > 0, pooled / norm.clamp_min(torch.finfo(pooled.dtype).tiny),
                       torch.zeros_like(pooled))
