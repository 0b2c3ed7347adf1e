"""Two-head label encoder mapping binary masks to stride-16 encodings."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import group_norm

HEADS = ("tra", "ind")


@dataclass
class MaskEncoding:
    values: torch.Tensor  # N x D x h x w
    head: str

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _block(cin, cout, stride):
    conv = (nn.Conv2d(cin, cout, 3, 2, 1, bias=False) if stride == 2
            else nn.Conv2d(cin, cout, stride, stride, 0, bias=False))
    return nn.Sequential(conv, group_norm(cout), nn.ReLU())


class MaskEncoder(nn.Module):
    """Shared strided trunk (x2, x2, x4) followed by one 1x1 projection per head."""

    def __init__(self, dim: int = 16, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        self.dim = dim
        self.trunk = nn.Sequential(_block(1, widths[0], 2), _block(widths[0], widths[1], 2),
                                   _block(widths[1], widths[2], 4))
        self.heads = nn.ModuleDict({h: nn.Conv2d(widths[2], dim, 1) for h in HEADS})

    def forward(self, masks: torch.Tensor, check: bool = True) -> dict[str, torch.Tensor]:
        if masks.ndim != 4 or masks.shape[1] != 1:
            raise ValueError(f"masks must be N x 1 x S x S, got {tuple(masks.shape)}")
        if masks.shape[-1] % 16 or masks.shape[-2] % 16:
            raise ValueError(f"mask side must be divisible by 16, got {tuple(masks.shape[-2:])}")
        if check and not torch.all((masks == 0) | (masks == 1)):
            raise ValueError("mask encoder expects binary masks; binarize pseudo-labels first")
        # centre the {0, 1} input so empty and full masks differ beyond biases
        trunk = self.trunk(masks * 2.0 - 1.0)
        return {h: proj(trunk) for h, proj in self.heads.items()}

    def encode(self, masks: torch.Tensor, head: str) -> MaskEncoding:
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
        return MaskEncoding(self(masks)[head], head)
