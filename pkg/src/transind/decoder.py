"""Segmentation decoder fusing both branch encodings with backbone skips."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureMap, group_norm
from .maskenc import MaskEncoding


def _conv(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), group_norm(cout),
                         nn.ReLU())


class SegDecoder(nn.Module):
    """Upsample stride 16 -> 8 -> 4 -> 1, concatenating the matching skips."""

    def __init__(self, mask_dim: int = 16, skip_channels: tuple[int, int] = (32, 64),
                 widths: tuple[int, int, int] = (64, 32, 16)):
        super().__init__()
        low_ch, mid_ch = skip_channels
        w16, w8, w4 = widths
        self.fuse = _conv(2 * mask_dim, w16)
        self.up8 = nn.Sequential(_conv(w16 + mid_ch, w8), _conv(w8, w8))
        self.up4 = nn.Sequential(_conv(w8 + low_ch, w4), _conv(w4, w4))
        self.up1 = _conv(w4 + 3, w4)
        self.head = nn.Conv2d(w4, 1, 3, padding=1)
        # near-zero logits at init: uninformative 0.5 probabilities
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)

    def forward(self, e_tra: torch.Tensor, e_ind: torch.Tensor, low: torch.Tensor,
                mid: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        x = self.fuse(torch.cat([e_tra, e_ind], dim=1))
        x = F.interpolate(x, size=mid.shape[-2:], mode="bilinear", align_corners=False)
        x = self.up8(torch.cat([x, mid], dim=1))
        x = F.interpolate(x, size=low.shape[-2:], mode="bilinear", align_corners=False)
        x = self.up4(torch.cat([x, low], dim=1))
        x = F.interpolate(x, size=pixels.shape[-2:], mode="bilinear", align_corners=False)
        x = self.up1(torch.cat([x, pixels - 0.5], dim=1))
        return self.head(x)


def decode(decoder: SegDecoder, e_tra: MaskEncoding, e_ind: MaskEncoding,
           skips: dict[str, FeatureMap], pixels: torch.Tensor) -> torch.Tensor:
    """Foreground logits ``B x 1 x S x S`` for the target batch."""
    low, mid = skips["low"], skips["mid"]
    size = pixels.shape[-1]
    if low.stride != 4 or mid.stride != 8:
        raise ValueError(f"skips must be at strides 4 and 8, got {low.stride} and {mid.stride}")
    for name, v, stride in (("tra", e_tra.values, 16), ("ind", e_ind.values, 16),
                            ("low", low.values, 4), ("mid", mid.values, 8)):
        if v.shape[-1] * stride != size or v.shape[-2] * stride != size:
            raise ValueError(f"{name} input of spatial size {tuple(v.shape[-2:])} is not at "
                             f"stride {stride} for {size}-px patches")
    return decoder(e_tra.values, e_ind.values, low.values, mid.values, pixels)


def binarize(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Sigmoid then threshold; probabilities equal to the threshold count as foreground."""
    return (torch.sigmoid(logits) >= threshold).to(torch.uint8)
