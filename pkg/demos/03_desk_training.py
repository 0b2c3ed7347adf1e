"""
Training a small model and running two-stage inference
======================================================

Trains the joint model on synthetic tiles for 1200 episodes, then
segments a test set drawn from the shifted stain style. Stage 1 uses
training templates; stage 2 reuses stage-1 predictions on the test patches
as templates. Takes a few minutes on one CPU core.

This is the setting used by transind.bench. With much shorter runs (a few
hundred episodes) the model still predicts all background.
"""

import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from transind.bench import bench_config, bench_data
from transind.checkpoint import set_deterministic
from transind.cli import format_table, overlay
from transind.config import StageConfig
from transind.datakit import patchify
from transind.inference import (assemble, geometry_of, rank_candidates, run_stage1,
                                run_stage2)
from transind.metrics import evaluate
from transind.trainer import fit

EPISODES = int(os.environ.get("EPISODES", 1200))
out = Path(__file__).with_name("demo_out")
out.mkdir(exist_ok=True)

torch.set_num_threads(1)
set_deterministic(True)

cfg = bench_config(seed=0, episodes=EPISODES)
train, test = bench_data(seed=0)
print(f"{len(train)} training tiles, {len(test)} shifted test tiles, {EPISODES} episodes")

model, _ = fit(train, None, cfg)

pool = patchify(train, cfg.data.patch_size, cfg.data.overlap)
geo = geometry_of(test, cfg.data.patch_size, 0)
targets = [p for g in geo.values() for p in g.patches]
gts = {r.id: r.mask for r in test}

s1 = run_stage1(model, pool, targets, StageConfig(stage=1))
s2 = run_stage2(model, s1, targets, StageConfig(stage=2))
m1, m2 = assemble(s1, geo), assemble(s2, geo)
print(format_table([(1, evaluate(m1, gts)), (2, evaluate(m2, gts))]))

# Which test patches did stage 2 pick as templates for the first target?
print("nearest test patches:", rank_candidates(targets[0].id, s1)[:3])

tiles = [overlay(r.pixels, r.mask, m2[r.id]) for r in test[:4]]
Image.fromarray(np.concatenate(tiles, axis=1)).save(out / "03_predictions.png")
print("wrote", out / "03_predictions.png")
