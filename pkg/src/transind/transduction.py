"""Attention-based label propagation from template masks to a target."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureMap
from .maskenc import MaskEncoding

DEFAULT_TAU = 1.0 / 30.0


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # batch x L x C
    origin: str  # "template" | "target"
    grid: tuple[int, int]
    n_images: int


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor,
              w_o: torch.Tensor | None = None, n_heads: int = 1,
              tau: float = DEFAULT_TAU, return_weights: bool = False):
    """Multi-head scaled attention ``softmax(q W_q (k W_k)^T * tau) v W_v``.

    ``tau`` multiplies the logits. Shapes: ``q`` is ``(..., n, d_q)``, ``k``
    is ``(..., m, d_k)``, ``v`` is ``(..., m, d_v)``. Heads split the projected
    query/key width and the projected value width evenly; head outputs are
    concatenated and, when ``w_o`` is given, mixed by it.
    """
    if k.shape[-2] == 0:
        raise ValueError("attention needs at least one key/value token")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"keys ({k.shape[-2]}) and values ({v.shape[-2]}) disagree in length")
    qp, kp, vp = q @ w_q, k @ w_k, v @ w_v
    d_model, d_val = qp.shape[-1], vp.shape[-1]
    if d_model % n_heads or d_val % n_heads:
        raise ValueError(f"widths {d_model}/{d_val} not divisible by {n_heads} heads")

    def split(x):
        return x.unflatten(-1, (n_heads, x.shape[-1] // n_heads)).transpose(-3, -2)

    qh, kh, vh = split(qp), split(kp), split(vp)
    weights = torch.softmax((qh @ kh.transpose(-2, -1)) * tau, dim=-1)
    out = (weights @ vh).transpose(-3, -2).flatten(-2)
    if w_o is not None:
        out = out @ w_o
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, query_dim: int, key_dim: int, value_dim: int, model_dim: int,
                 value_model_dim: int | None = None, out_dim: int | None = None,
                 n_heads: int = 4, tau: float = DEFAULT_TAU):
        super().__init__()
        if tau <= 0:
            raise ValueError("tau must be positive")
        value_model_dim = value_model_dim or value_dim
        out_dim = out_dim or value_model_dim
        self.n_heads, self.tau = n_heads, tau
        self.w_q = nn.Parameter(torch.empty(query_dim, model_dim))
        self.w_k = nn.Parameter(torch.empty(key_dim, model_dim))
        self.w_v = nn.Parameter(torch.empty(value_dim, value_model_dim))
        self.w_o = nn.Parameter(torch.empty(value_model_dim, out_dim))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.xavier_uniform_(w)

    def forward(self, q, k, v, return_weights=False):
        return attention(q, k, v, self.w_q, self.w_k, self.w_v, self.w_o,
                         self.n_heads, self.tau, return_weights)


def sinusoidal_2d(height: int, width: int, channels: int) -> torch.Tensor:
    """Fixed 2D sine/cosine encodings, ``(height * width) x channels``, row-major.

    The first half of the channels encodes the row, the second half the column.
    """
    if channels % 4:
        raise ValueError(f"positional encoding needs channels divisible by 4, got {channels}")
    quarter = channels // 4
    freq = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)

    def enc(pos):
        ang = pos[:, None] * freq[None]
        return torch.cat([ang.sin(), ang.cos()], dim=1)

    ey = enc(torch.arange(height, dtype=torch.float64))
    ex = enc(torch.arange(width, dtype=torch.float64))
    pe = torch.cat([ey[:, None].expand(height, width, -1), ex[None].expand(height, width, -1)],
                   dim=-1)
    return pe.reshape(height * width, channels)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim, n_heads, ff_mult, tau):
        super().__init__()
        self.attn = MultiHeadAttention(dim, dim, dim, dim, n_heads=n_heads, tau=tau)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ff(x))


class TransformerEncoder(nn.Module):
    """Self-attention over flattened feature tokens, shared by templates and targets."""

    def __init__(self, dim: int, n_heads: int = 4, n_layers: int = 2, ff_mult: int = 2,
                 tau: float = DEFAULT_TAU, positional: bool = True):
        super().__init__()
        self.dim, self.positional = dim, positional
        self.blocks = nn.ModuleList(EncoderBlock(dim, n_heads, ff_mult, tau)
                                    for _ in range(n_layers))

    def forward(self, fm: torch.Tensor, joint: bool) -> TokenSequence:
        """Tokenize ``N x C x h x w`` features.

        ``joint=True`` concatenates all N images into one sequence (templates);
        otherwise each image is its own sequence (a batch of targets).
        """
        n, c, h, w = fm.shape
        if c != self.dim:
            raise ValueError(f"encoder width is {self.dim}, features have {c} channels")
        tokens = fm.permute(0, 2, 3, 1).reshape(n, h * w, c)
        if self.positional:
            tokens = tokens + sinusoidal_2d(h, w, c).to(tokens)
        if joint:
            tokens = tokens.reshape(1, n * h * w, c)
        for block in self.blocks:
            tokens = block(tokens)
        return TokenSequence(tokens, "template" if joint else "target", (h, w), n)


def encode_tokens(encoder: TransformerEncoder, templates: FeatureMap, target: FeatureMap
                  ) -> tuple[TokenSequence, TokenSequence]:
    if templates.channels != target.channels:
        raise ValueError(f"template ({templates.channels}) and target ({target.channels}) "
                         "feature channels differ")
    return encoder(templates.values, joint=True), encoder(target.values, joint=False)


class DecoderBlock(nn.Module):
    def __init__(self, dim, mask_dim, n_heads, ff_mult, tau, last):
        super().__init__()
        self.attn = MultiHeadAttention(dim, dim, mask_dim, dim, n_heads=n_heads, tau=tau)
        self.last = last
        if not last:
            self.lift = nn.Linear(mask_dim, dim)
            self.norm1 = nn.LayerNorm(dim)
            self.ff = FeedForward(dim, ff_mult * dim)
            self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, keys, values):
        prop = self.attn(x, keys, values)
        if not self.last:
            x = self.norm1(x + self.lift(prop))
            x = self.norm2(x + self.ff(x))
        return x, prop


class LabelPropagator(nn.Module):
    """Cross-attention stack: target queries, template keys, encoded-mask values.

    Intermediate blocks refine the query stream with the propagated labels;
    the last block's propagated encoding is the output.
    """

    def __init__(self, dim: int, mask_dim: int = 16, n_heads: int = 4, n_layers: int = 2,
                 ff_mult: int = 2, tau: float = DEFAULT_TAU):
        super().__init__()
        if n_layers < 1:
            raise ValueError("label propagation needs at least one cross-attention block")
        self.blocks = nn.ModuleList(
            DecoderBlock(dim, mask_dim, n_heads, ff_mult, tau, last=(i == n_layers - 1))
            for i in range(n_layers))

    def forward(self, target: TokenSequence, templates: TokenSequence,
                encoding: MaskEncoding) -> MaskEncoding:
        e = encoding.values
        n, d, h, w = e.shape
        values = e.permute(0, 2, 3, 1).reshape(1, n * h * w, d)
        if values.shape[1] != templates.tokens.shape[1]:
            raise ValueError(f"{values.shape[1]} mask tokens do not align with "
                             f"{templates.tokens.shape[1]} template tokens")
        keys = templates.tokens
        x = target.tokens
        prop = None
        for block in self.blocks:
            x, prop = block(x, keys.expand(x.shape[0], -1, -1),
                            values.expand(x.shape[0], -1, -1))
        th, tw = target.grid
        out = prop.reshape(x.shape[0], th, tw, d).permute(0, 3, 1, 2)
        return MaskEncoding(out, "tra")


def propagate(propagator: LabelPropagator, target: TokenSequence, templates: TokenSequence,
              encoding: MaskEncoding) -> MaskEncoding:
    return propagator(target, templates, encoding)
