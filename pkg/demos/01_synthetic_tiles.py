"""
Synthetic tiles, patches and episodes
=====================================

Walks through the data side of the library: generate a few H&E-like tiles,
cut them into overlapping patches, stitch them back, and draw a training
episode. Writes an overlay PNG next to this script.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from transind.cli import overlay
from transind.datakit import apply_dihedral, patchify, sample_episode, stitch, synth_generate

out = Path(__file__).with_name("demo_out")
out.mkdir(exist_ok=True)

# Four 128x128 tiles in the training style and one in the shifted style.
train = synth_generate(4, 128, 128, seed=0)
shifted = synth_generate(1, 128, 128, seed=0, shift=1.0, prefix="shifted")
for r in train + shifted:
    n = len(r.meta["ellipses"])
    print(f"{r.id}: {r.shape}, {n} nuclei, foreground {r.mask.mean():.1%}")

# 64-px patches with 32 px of overlap: 3 offsets per axis, 9 patches per tile.
patches = patchify(train, 64, 32)
print(len(patches), "patches, first ids:", [p.id for p in patches[:3]])

# Stitching the patch masks back gives the original mask exactly.
first = [p for p in patches if p.parent_id == train[0].id]
back = stitch([(p, p.mask.astype(float)) for p in first], *train[0].shape)
assert np.array_equal(back >= 0.5, train[0].mask.astype(bool))

# The eight dihedral transforms used for augmentation: where the top-left corner lands.
corner = np.zeros((3, 3), int)
corner[0, 0] = 1
for e in range(8):
    print(e, np.argwhere(apply_dihedral(corner, e))[0])

# One episode: 3 templates and 3 targets, all from the same source tile.
ep = sample_episode(patches, 3, 3, seed=3, group_by="parent")
print("templates:", ep.template_ids)
print("targets:  ", ep.target_ids)

# Ground-truth contours over the plain and the shifted tile.
tiles = [overlay(r.pixels, r.mask, np.zeros_like(r.mask)) for r in (train[0], shifted[0])]
Image.fromarray(np.concatenate(tiles, axis=1)).save(out / "01_tiles.png")
print("wrote", out / "01_tiles.png")
