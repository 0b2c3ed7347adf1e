"""Command-line entry point.

Every command writes into a run directory (``--out``, default
``$TRANSIND_OUTPUT_ROOT/<command>`` or ``<output_dir>/<command>`` from the
config) holding the resolved ``config.json``, a ``manifest.json`` with input
hashes and library versions, and a ``log.txt``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._io import file_sha256, tree_sha256
from .checkpoint import Checkpoint, set_deterministic
from .config import RunConfig, StageConfig, load_config
from .datakit import (DataError, ImageRecord, ingest_monuseg, load_records, make_patches,
                      patchify, save_records, synth_generate)
from .inference import (PseudoLabelStore, assemble, geometry_of, load_mask_png, run_stage1,
                        run_stage2, save_mask_png)
from .metrics import EvalReport, evaluate
from .trainer import NumericError, retrain_full, train

OUTPUT_ROOT_ENV = "TRANSIND_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
STAGE_ROWS = {1: "Joint", 2: "Joint & 2-Stage Inf."}

log = logging.getLogger("transind")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- run directory plumbing --------------------------------------------------

def _resolve_config(args) -> RunConfig:
    try:
        cfg = load_config(args.config, args.overrides)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, cfg.output_dir)
        out = Path(root) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _start(args, cfg: RunConfig | None = None) -> tuple[RunConfig, Path]:
    cfg = cfg if cfg is not None else _resolve_config(args)
    cfg.deterministic = cfg.deterministic or args.deterministic
    set_deterministic(cfg.deterministic)
    out = _run_dir(args, cfg)
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("transind").addHandler(handler)
    cfg.save(out / "config.json")
    return cfg, out


def _versions() -> dict[str, str]:
    import PIL
    import scipy
    import torch

    return {"transind": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__,
            "pillow": PIL.__version__}


def _write_manifest(out: Path, command: str, inputs: dict[str, str], outputs: dict[str, str],
                    extra: dict | None = None) -> None:
    manifest = {"command": command, "inputs": inputs, "outputs": outputs,
                "versions": _versions(), **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _dataset_hash(path: Path) -> str:
    if not path.is_dir():
        raise DataError(f"dataset directory {path} does not exist")
    return tree_sha256(path, "*.npz")


def _records(path: str | Path) -> list[ImageRecord]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"dataset directory {path} does not exist")
    records = load_records(path)
    if not records:
        raise DataError(f"no records found in {path}")
    return records


def _checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return Checkpoint.load(path)


# -- commands ----------------------------------------------------------------

def cmd_prepare(args) -> int:
    cfg, out = _start(args)
    records, summary = ingest_monuseg(args.images, args.annotations, source=args.source)
    if not records:
        raise DataError(f"no images ingested from {args.images}: {summary.errors}")
    data_dir = out / "records"
    save_records(records, data_dir)
    n_patches = {r.id: len(make_patches(r, cfg.data.patch_size, cfg.data.overlap))
                 for r in records}
    stats = {"images": len(records), "total_nuclei": summary.total_nuclei,
             "nucleus_counts": summary.nucleus_counts,
             "skipped_regions": summary.skipped_regions,
             "empty_annotations": summary.empty_annotations, "errors": summary.errors,
             "patches": n_patches, "total_patches": sum(n_patches.values())}
    (out / "summary.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    _write_manifest(out, "prepare", {"images": tree_sha256(args.images),
                                     "annotations": tree_sha256(args.annotations)},
                    {"records": _dataset_hash(data_dir)})
    print(f"{len(records)} images, {summary.total_nuclei} nuclei, "
          f"{stats['total_patches']} patches -> {data_dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg, out = _start(args)
    records = synth_generate(args.n, args.height, args.width, seed=args.seed, shift=args.shift,
                             jitter=args.jitter, source=args.source, prefix=args.prefix)
    data_dir = out / "records"
    save_records(records, data_dir)
    _write_manifest(out, "synth", {}, {"records": _dataset_hash(data_dir)},
                    {"seed": args.seed, "shift": args.shift, "jitter": args.jitter})
    print(f"{len(records)} synthetic images -> {data_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _start(args)
    records = _records(args.data)
    ckpt = train(records, cfg, log_path=out / "train.jsonl")
    path = ckpt.save(out / "checkpoint.tis")
    _write_manifest(out, "train", {"dataset": _dataset_hash(Path(args.data))},
                    {"checkpoint": file_sha256(path)},
                    {"best_epoch": ckpt.meta.get("best_epoch")})
    print(f"best epoch {ckpt.meta.get('best_epoch')} "
          f"(val F1 {ckpt.meta.get('best_val_f1', float('nan')):.4f}) -> {path}")
    return EXIT_OK


def cmd_retrain_full(args) -> int:
    selection = _checkpoint(args.selection)
    if args.config or args.overrides:
        raise UsageError("retrain-full reuses the selection run's config; drop --config/--set")
    cfg, out = _start(args, selection.run_config)
    records = _records(args.data)
    digest = Checkpoint.digest(args.selection)
    ckpt = retrain_full(records, selection, log_path=out / "train.jsonl",
                        selection_digest=digest)
    path = ckpt.save(out / "checkpoint.tis")
    _write_manifest(out, "retrain-full", {"dataset": _dataset_hash(Path(args.data)),
                                          "selection_checkpoint": digest},
                    {"checkpoint": file_sha256(path)})
    print(f"retrained for {ckpt.epoch} epochs -> {path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    cfg, out = _start(args)
    model = ckpt.build()
    dc = ckpt.run_config.data
    test = _records(args.test_data)
    geo = geometry_of(test, dc.patch_size, dc.overlap)
    targets = [p for g in geo.values() for p in g.patches]
    inputs = {"checkpoint": Checkpoint.digest(args.checkpoint),
              "test_data": _dataset_hash(Path(args.test_data))}
    outputs = {}
    stages = {"1": [1], "2": [2], "both": [1, 2]}[args.stage]
    sc = cfg.stage

    store1 = None
    if 1 in stages:
        if args.train_data is None:
            raise UsageError("stage 1 needs --train-data")
        pool = patchify(_records(args.train_data), dc.patch_size, dc.overlap)
        inputs["train_data"] = _dataset_hash(Path(args.train_data))
        store1 = run_stage1(model, pool, targets,
                            StageConfig(1, sc.n_templates, sc.k_candidates, sc.exclude_self,
                                        sc.template_seed, sc.binarize_threshold))
        outputs["store_stage1"] = file_sha256(store1.save(out / "store_stage1.tis"))
        _write_masks(assemble(store1, geo, sc.binarize_threshold), out / "masks", 1, outputs)
    if 2 in stages:
        if store1 is None:
            src = Path(args.stage1_store or out / "store_stage1.tis")
            if not src.is_file():
                raise DataError(f"stage 2 needs a stage-1 store; {src} does not exist")
            store1 = PseudoLabelStore.load(src)
            inputs["store_stage1"] = file_sha256(src)
        store2 = run_stage2(model, store1, targets,
                            StageConfig(2, sc.n_templates, sc.k_candidates, sc.exclude_self,
                                        sc.template_seed, sc.binarize_threshold))
        outputs["store_stage2"] = file_sha256(store2.save(out / "store_stage2.tis"))
        _write_masks(assemble(store2, geo, sc.binarize_threshold), out / "masks", 2, outputs)
    _write_manifest(out, "infer", inputs, outputs, {"stages": stages})
    print(f"stage(s) {stages} for {len(test)} images -> {out / 'masks'}")
    return EXIT_OK


def _write_masks(masks: dict[str, np.ndarray], directory: Path, stage: int,
                 outputs: dict[str, str]) -> None:
    for image_id, mask in sorted(masks.items()):
        path = save_mask_png(mask, directory / f"{image_id}_stage{stage}.png")
        outputs[f"masks/{path.name}"] = file_sha256(path)


_STAGE_RE = re.compile(r"^(?P<id>.+)_stage(?P<stage>\d+)$")


def read_prediction_dir(directory: str | Path) -> dict[int | None, dict[str, np.ndarray]]:
    """PNG masks grouped by stage; files without a ``_stage<k>`` suffix go under ``None``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"prediction directory {directory} does not exist")
    groups: dict[int | None, dict[str, np.ndarray]] = {}
    for path in sorted(directory.glob("*.png")):
        m = _STAGE_RE.match(path.stem)
        stage, image_id = (int(m["stage"]), m["id"]) if m else (None, path.stem)
        groups.setdefault(stage, {})[image_id] = load_mask_png(path)
    if not groups:
        raise DataError(f"no PNG masks in {directory}")
    return groups


def read_ground_truth(directory: str | Path) -> dict[str, np.ndarray]:
    """Ground truth from a record cache (``*.npz``) or from plain ``<id>.png`` masks."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"ground-truth directory {directory} does not exist")
    if any(directory.glob("*.npz")):
        gts = {}
        for r in load_records(directory):
            if r.mask is None:
                raise DataError(f"record {r.id} has no mask")
            gts[r.id] = r.mask
        return gts
    groups = read_prediction_dir(directory)
    if list(groups) != [None]:
        raise DataError(f"ground-truth PNGs in {directory} must not carry a stage suffix")
    return groups[None]


def cmd_eval(args) -> int:
    cfg, out = _start(args)
    preds = read_prediction_dir(args.pred_dir)
    gts = read_ground_truth(args.gt_dir)
    rows = []
    for stage in sorted(preds, key=lambda s: -1 if s is None else s):
        try:
            report = evaluate(preds[stage], gts, cfg.metrics.iou_thresh, cfg.metrics.f1_mode)
        except KeyError as exc:
            raise DataError(str(exc.args[0])) from exc
        name = "eval.json" if stage is None else f"eval_stage{stage}.json"
        report.save(out / name)
        rows.append((stage, report))
    _write_manifest(out, "eval", {"pred_dir": tree_sha256(args.pred_dir, "*.png"),
                                  "gt_dir": tree_sha256(args.gt_dir)},
                    {name: file_sha256(out / name) for name in sorted(os.listdir(out))
                     if name.startswith("eval")})
    print(format_table(rows))
    return EXIT_OK


def format_table(rows: Sequence[tuple[int | None, EvalReport]]) -> str:
    lines = ["| Method | Dice | F1 | Mean |", "|---|---|---|---|"]
    for stage, report in rows:
        label = STAGE_ROWS.get(stage, "predictions" if stage is None else f"stage {stage}")
        a = report.aggregate
        lines.append(f"| {label} | {100 * a['dice']:.2f} | {100 * a['f1']:.2f} | "
                     f"{100 * a['dice_f1_mean']:.2f} |")
    return "\n".join(lines)


def overlay(pixels: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """GT contours in green and predicted contours in red over the RGB tile (uint8)."""
    from skimage.segmentation import find_boundaries

    img = (np.clip(pixels, 0, 1) * 255).astype(np.uint8).copy()
    img[find_boundaries(gt.astype(bool), mode="inner")] = (0, 255, 0)
    img[find_boundaries(pred.astype(bool), mode="inner")] = (255, 0, 0)
    return img


def cmd_report(args) -> int:
    from PIL import Image

    cfg, out = _start(args)
    eval_dir = Path(args.eval_dir)
    rows = []
    for path in sorted(eval_dir.glob("eval*.json")):
        m = re.match(r"eval_stage(\d+)\.json$", path.name)
        rows.append((int(m[1]) if m else None, EvalReport.load(path)))
    if not rows:
        raise DataError(f"no eval*.json reports in {eval_dir}")
    table = format_table(rows)
    (out / "table.md").write_text(table + "\n")
    print(table)

    if args.pred_dir is not None and args.data is not None:
        preds = read_prediction_dir(args.pred_dir)
        records = {r.id: r for r in _records(args.data)}
        for stage, masks in preds.items():
            for image_id in sorted(masks)[:args.n_overlays]:
                rec = records.get(image_id)
                if rec is None or rec.mask is None:
                    raise DataError(f"no ground-truth record for {image_id}")
                suffix = "" if stage is None else f"_stage{stage}"
                (out / "overlays").mkdir(exist_ok=True)
                img = overlay(rec.pixels, rec.mask, masks[image_id])
                Image.fromarray(img).save(out / "overlays" / f"{image_id}{suffix}.png")
    _write_manifest(out, "report", {"eval_dir": tree_sha256(eval_dir, "eval*.json")},
                    {"table.md": file_sha256(out / "table.md")})
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic kernels")
    common.add_argument("--out", help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = _Parser(prog="transind", description="Few-shot nuclei segmentation.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="ingest MoNuSeg-format data")
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--source", choices=["train", "test"], default="train")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--source", choices=["train", "test", "synthetic"], default="synthetic")
    p.add_argument("--prefix", default="synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="episodic training with validation")
    p.add_argument("--data", required=True, help="record directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrain-full", parents=[common],
                       help="retrain on all data for the selected epoch count")
    p.add_argument("--data", required=True)
    p.add_argument("--selection", required=True, help="checkpoint from `train`")
    p.set_defaults(func=cmd_retrain_full)

    p = sub.add_parser("infer", parents=[common], help="stage-1 and/or stage-2 inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--train-data", help="labelled template pool for stage 1")
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--stage1-store", help="existing stage-1 store for --stage 2")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predicted masks")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="tables and contour overlays")
    p.add_argument("--eval-dir", required=True)
    p.add_argument("--pred-dir")
    p.add_argument("--data", help="record directory with images and ground truth")
    p.add_argument("--n-overlays", type=int, default=4)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = list(logging.getLogger("transind").handlers)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        logger = logging.getLogger("transind")
        for h in logger.handlers[:]:
            if h not in handlers:
                logger.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
