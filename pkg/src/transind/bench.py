"""Desk-scale synthetic benchmark: two-stage gain and branch ablations on a shifted domain.

Training uses 8 synthetic 192x192 images cut into 64-px patches with 32-px
overlap (200 patches). The test set is 50 single-patch 64x64 images drawn from
a shifted stain style.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, StageConfig, load_config
from .datakit import ImageRecord, patchify, synth_generate
from .inference import assemble, geometry_of, run_stage1, run_stage2
from .metrics import evaluate
from .trainer import fit

BENCH_OVERRIDES = [
    "model.backbone_widths=[16,32,64]",
    "model.decoder_widths=[32,16,16]",
    "data.patch_size=64",
    "data.overlap=32",
    "train.lr=1e-3",
    "train.epochs=1",
    'train.episode_grouping="parent"',
]


@dataclass
class BenchResult:
    seed: int
    stage1: dict[str, float]
    stage2: dict[str, float]
    overrides: list[str] = field(default_factory=list)

    @property
    def gain(self) -> float:
        return self.stage2["dice"] - self.stage1["dice"]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stage1": self.stage1, "stage2": self.stage2,
                "gain": self.gain, "overrides": self.overrides}


def bench_config(seed: int, episodes: int = 1200, overrides: list[str] | None = None
                 ) -> RunConfig:
    return load_config(overrides=BENCH_OVERRIDES + [f"train.seed={seed}",
                                                    f"train.episodes_per_epoch={episodes}"]
                       + list(overrides or []))


def bench_data(seed: int, shift: float = 1.0, jitter: float = 0.1
               ) -> tuple[list[ImageRecord], list[ImageRecord]]:
    train = synth_generate(8, 192, 192, seed=1000 + seed, jitter=jitter)
    test = synth_generate(50, 64, 64, seed=2000 + seed, shift=shift, source="test",
                          prefix="test")
    return train, test


def run_benchmark(seed: int, episodes: int = 1200, overrides: list[str] | None = None,
                  shift: float = 1.0, stage2: bool = True, jitter: float = 0.1
                  ) -> BenchResult:
    """Train one model and score stage-1 (and stage-2) inference on the shifted set."""
    cfg = bench_config(seed, episodes, overrides)
    train, test = bench_data(seed, shift, jitter)
    model, _ = fit(train, None, cfg)
    pool = patchify(train, cfg.data.patch_size, cfg.data.overlap)
    geo = geometry_of(test, cfg.data.patch_size, 0)
    targets = [p for g in geo.values() for p in g.patches]
    gts = {r.id: r.mask for r in test}

    s1 = run_stage1(model, pool, targets, StageConfig(stage=1, template_seed=seed))
    r1 = evaluate(assemble(s1, geo), gts, cfg.metrics.iou_thresh, cfg.metrics.f1_mode)
    r2 = r1
    if stage2:
        s2 = run_stage2(model, s1, targets, StageConfig(stage=2, template_seed=seed))
        r2 = evaluate(assemble(s2, geo), gts, cfg.metrics.iou_thresh, cfg.metrics.f1_mode)
    return BenchResult(seed, dict(r1.aggregate), dict(r2.aggregate), list(overrides or []))


def main(argv: list[str] | None = None) -> None:
    import argparse

    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--episodes", type=int, default=1200)
    ap.add_argument("--set", action="append", default=[], dest="overrides")
    ap.add_argument("--jitter", type=float, default=0.1, help="training stain jitter")
    args = ap.parse_args(argv)
    for s in args.seeds:
        res = run_benchmark(s, args.episodes, args.overrides, jitter=args.jitter)
        print(json.dumps(res.to_dict()), flush=True)


if __name__ == "__main__":
    main()
