"""Episodic meta-training with best-epoch selection on a held-out image split."""

from __future__ import annotations

import copy
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, build_model
from .config import RunConfig, StageConfig
from .datakit import DataError, ImageRecord, patchify, sample_episode
from .inference import assemble, geometry_of, run_stage1
from .metrics import evaluate
from .model import JointModel, to_tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A training loss became non-finite."""


def split_validation(records: Sequence[ImageRecord], fraction: float, seed: int
                     ) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Seeded split by image, so overlapping patches never straddle the split."""
    order = np.random.default_rng(seed).permutation(len(records))
    n_val = max(1, int(round(fraction * len(records))))
    if n_val >= len(records):
        raise DataError(f"cannot hold out {n_val} of {len(records)} images for validation")
    val_idx = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def episode_loss(model: JointModel, episode, loss_weight_inner: float, dtype
                 ) -> tuple[torch.Tensor, dict[str, float]]:
    tpl_pix = to_tensor([t[0] for t in episode.templates], dtype)
    tpl_mask = to_tensor([t[1] for t in episode.templates], dtype)
    tgt_pix = to_tensor([t[0] for t in episode.targets], dtype)
    tgt_mask = to_tensor([t[1] for t in episode.targets], dtype)
    out = model(tpl_pix, tpl_mask, tgt_pix)
    bce = F.binary_cross_entropy_with_logits(out.logits, tgt_mask)
    loss = bce + loss_weight_inner * out.inner_loss
    return loss, {"loss": float(loss.detach()), "bce": float(bce.detach()),
                  "inner": float(out.inner_loss.detach())}


def validate(model: JointModel, val_records: Sequence[ImageRecord], pool, cfg: RunConfig
             ) -> dict[str, float]:
    stage = StageConfig(stage=1, n_templates=cfg.train.n_templates,
                        template_seed=cfg.train.val_templates_seed)
    geo = geometry_of(val_records, cfg.data.patch_size, cfg.data.overlap)
    patches = [p for g in geo.values() for p in g.patches]
    was_training = model.training
    store = run_stage1(model, pool, patches, stage)
    model.train(was_training)
    masks = assemble(store, geo)
    report = evaluate(masks, {r.id: r.mask for r in val_records}, cfg.metrics.iou_thresh,
                      cfg.metrics.f1_mode)
    return {"val_dice": report.aggregate["dice"], "val_f1": report.aggregate["f1"]}


def _log(fh, record):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def fit(train_records: Sequence[ImageRecord], val_records: Sequence[ImageRecord] | None,
        cfg: RunConfig, epochs: int | None = None, log_path: str | Path | None = None,
        model: JointModel | None = None) -> tuple[JointModel, Checkpoint]:
    """Train for ``epochs`` epochs; returns the last model and a best-by-F1 checkpoint.

    Without validation records the checkpoint holds the final weights.
    """
    tc = cfg.train
    epochs = tc.epochs if epochs is None else epochs
    if any(r.mask is None for r in train_records):
        raise DataError("training requires a mask for every record")
    patches = patchify(train_records, cfg.data.patch_size, cfg.data.overlap)
    per_epoch = tc.episodes_per_epoch or math.ceil(len(patches) / tc.n_targets)
    model = model if model is not None else build_model(cfg, seed=tc.seed)
    dtype = next(model.parameters()).dtype
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)

    fh = open(log_path, "w") if log_path is not None else None
    history = []
    best_state, best_epoch, best_f1 = None, 0, -1.0
    try:
        if val_records:
            model.eval()
            scores = validate(model, val_records, patches, cfg)
            history.append({"epoch": 0, **scores})
            _log(fh, history[-1])
            best_state, best_f1 = copy.deepcopy(model.state_dict()), scores["val_f1"]
        step = 0
        for epoch in range(1, epochs + 1):
            model.train()
            for i in range(per_epoch):
                ep_seed = (tc.seed, epoch, i)
                episode = sample_episode(patches, tc.n_templates, tc.n_targets,
                                         seed=ep_seed, augmentation=tc.augmentation,
                                         group_by=tc.episode_grouping)
                loss, terms = episode_loss(model, episode, tc.loss_weight_inner, dtype)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss at step {step} (epoch {epoch}, "
                                       f"episode seed {ep_seed}): {terms}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                _log(fh, {"step": step, "epoch": epoch, "lr": tc.lr, **terms})
                step += 1
            if val_records:
                model.eval()
                scores = validate(model, val_records, patches, cfg)
                history.append({"epoch": epoch, **scores})
                _log(fh, history[-1])
                log.info("epoch %d: val dice %.4f f1 %.4f", epoch, scores["val_dice"],
                         scores["val_f1"])
                if scores["val_f1"] > best_f1:
                    best_state, best_epoch, best_f1 = (copy.deepcopy(model.state_dict()),
                                                       epoch, scores["val_f1"])
    finally:
        if fh is not None:
            fh.close()

    model.eval()
    ckpt = Checkpoint.from_model(model, cfg, epoch=epochs, history=history,
                                 meta={"final_epoch": epochs, "episodes_per_epoch": per_epoch})
    if val_records:
        ckpt.state = {k: v.detach().cpu().numpy().copy() for k, v in best_state.items()}
        ckpt.epoch = best_epoch
        ckpt.meta.update(best_epoch=best_epoch, best_val_f1=best_f1, selection="val_f1")
    return model, ckpt


def train(records: Sequence[ImageRecord], cfg: RunConfig,
          log_path: str | Path | None = None) -> Checkpoint:
    """Hold out ``val_fraction`` of the images, train, and keep the best-F1 epoch."""
    train_recs, val_recs = split_validation(records, cfg.train.val_fraction, cfg.train.seed)
    _, ckpt = fit(train_recs, val_recs, cfg, log_path=log_path)
    ckpt.meta["val_ids"] = [r.id for r in val_recs]
    return ckpt


def retrain_full(records: Sequence[ImageRecord], selection: Checkpoint,
                 log_path: str | Path | None = None, selection_digest: str | None = None
                 ) -> Checkpoint:
    """Retrain on every record for the best epoch count found by ``selection``."""
    cfg = selection.run_config
    best_epoch = int(selection.meta.get("best_epoch", selection.epoch))
    provenance = {"selection_best_epoch": best_epoch, "selection_digest": selection_digest,
                  "selection_val_f1": selection.meta.get("best_val_f1")}
    if best_epoch == 0:
        log.warning("selection run picked epoch 0; returning the initialization checkpoint")
        model = build_model(cfg, seed=cfg.train.seed).eval()
        return Checkpoint.from_model(model, cfg, epoch=0, meta={"retrain_full": provenance,
                                                                "degenerate": True})
    _, ckpt = fit(records, None, cfg, epochs=best_epoch, log_path=log_path)
    ckpt.meta["retrain_full"] = provenance
    return ckpt
