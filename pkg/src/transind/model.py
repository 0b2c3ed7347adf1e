"""The joint transductive/inductive segmentation network."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import induction
from .backbone import Backbone, FeatureMap, extract, pooled_descriptor
from .config import ModelConfig
from .decoder import SegDecoder, decode
from .maskenc import MaskEncoder, MaskEncoding
from .transduction import LabelPropagator, TransformerEncoder, encode_tokens


@dataclass
class ModelOutput:
    logits: torch.Tensor  # B x 1 x S x S
    inner_loss: torch.Tensor  # few-shot objective per residual entry (0 if induction is off)
    inner_trace: list[float]
    descriptors: torch.Tensor  # B x C unit-norm pooled deep target features


class JointModel(nn.Module):
    """Backbone, two-head mask encoder, transduction and induction branches, decoder.

    A disabled branch is replaced by a 1x1 projection of the target's deep
    features, so ablations keep the decoder input shape and still see the
    target at stride 16.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        if cfg.apply_to != "target":
            raise ValueError("the learned kernel can only be applied to target features")
        self.cfg = cfg
        w_low, w_mid, w_deep = cfg.backbone_widths
        self.backbone = Backbone(cfg.backbone_widths)
        self.mask_encoder = MaskEncoder(cfg.mask_dim, cfg.mask_widths)
        if cfg.use_transduction:
            self.encoder = TransformerEncoder(w_deep, cfg.n_heads, cfg.enc_layers, cfg.ff_mult,
                                              cfg.tau, cfg.positional)
            self.propagator = LabelPropagator(w_deep, cfg.mask_dim, cfg.n_heads, cfg.dec_layers,
                                              cfg.ff_mult, cfg.tau)
        else:
            self.plain_tra = nn.Conv2d(w_deep, cfg.mask_dim, 1)
        if not cfg.use_induction:
            self.plain_ind = nn.Conv2d(w_deep, cfg.mask_dim, 1)
        self.log_lambda = nn.Parameter(torch.tensor(math.log(cfg.lam)),
                                       requires_grad=cfg.learn_lambda)
        self.decoder = SegDecoder(cfg.mask_dim, (w_low, w_mid), cfg.decoder_widths)

    def _inner_loss(self, kernel, features, targets):
        # few-shot objective re-evaluated against (optionally detached) targets,
        # per residual entry
        pred = induction.apply(kernel, features).values
        data = ((pred - targets) ** 2).sum()
        return (data + self.lam * (kernel.weight ** 2).sum()) / targets.numel()

    @property
    def lam(self) -> torch.Tensor:
        return self.log_lambda.exp()

    def features(self, pixels: torch.Tensor) -> dict[str, FeatureMap]:
        return extract(self.backbone, pixels)

    def forward(self, template_pixels: torch.Tensor, template_masks: torch.Tensor,
                target_pixels: torch.Tensor, steps: int | None = None) -> ModelOutput:
        if steps is None:
            steps = self.cfg.train_steps if self.training else self.cfg.infer_steps
        n = template_pixels.shape[0]
        feats = self.features(torch.cat([template_pixels, target_pixels], dim=0))
        deep = feats["deep"].values
        f_tpl = FeatureMap(deep[:n], 16, "deep")
        f_tgt = FeatureMap(deep[n:], 16, "deep")
        skips = {k: FeatureMap(feats[k].values[n:], feats[k].stride, k) for k in ("low", "mid")}
        enc = self.mask_encoder(template_masks)

        if self.cfg.use_transduction:
            o_tpl, o_tgt = encode_tokens(self.encoder, f_tpl, f_tgt)
            e_tra = self.propagator(o_tgt, o_tpl, MaskEncoding(enc["tra"], "tra"))
        else:
            e_tra = MaskEncoding(self.plain_tra(f_tgt.values), "tra")

        if self.cfg.use_induction:
            targets = enc["ind"].detach() if self.cfg.detach_inner_targets else enc["ind"]
            problem = induction.FewShotProblem(f_tpl.values, enc["ind"], self.lam,
                                               self.cfg.kernel_size)
            kernel = induction.solve_iterative(problem, steps)
            e_ind = induction.apply(kernel, f_tgt.values)
            inner = self._inner_loss(kernel, f_tpl.values, targets)
            trace = kernel.trace
        else:
            e_ind = MaskEncoding(self.plain_ind(f_tgt.values), "ind")
            inner = deep.new_zeros(())
            trace = []

        logits = decode(self.decoder, e_tra, e_ind, skips, target_pixels)
        return ModelOutput(logits, inner, trace, pooled_descriptor(f_tgt))


def to_tensor(images: np.ndarray | list, dtype=torch.float32) -> torch.Tensor:
    """Stack ``H x W x 3`` images into ``B x 3 x H x W`` or masks into ``B x 1 x H x W``."""
    arr = np.stack([np.asarray(a) for a in images]) if isinstance(images, list) else images
    t = torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)
    if t.ndim == 4:
        return t.permute(0, 3, 1, 2).contiguous()
    return t.unsqueeze(1)
