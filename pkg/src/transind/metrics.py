"""Dice coefficient, object-level F1 and per-dataset evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _check(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    pred, gt = _check(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


def pixel_f1(pred, gt) -> float:
    # identical to dice on binary masks; kept separate so reports can name it
    return dice(pred, gt)


def iou_matrix(pred_labels: np.ndarray, n_pred: int, gt_labels: np.ndarray, n_gt: int
               ) -> np.ndarray:
    """Pairwise IoU between labelled components (label 0 is background)."""
    joint = np.bincount(pred_labels.ravel() * (n_gt + 1) + gt_labels.ravel(),
                        minlength=(n_pred + 1) * (n_gt + 1)).reshape(n_pred + 1, n_gt + 1)
    inter = joint[1:, 1:].astype(np.float64)
    area_p = joint[1:, :].sum(axis=1)
    area_g = joint[:, 1:].sum(axis=0)
    union = area_p[:, None] + area_g[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def match_objects(pred, gt, iou_thresh: float = 0.5) -> tuple[int, int, int]:
    """Greedy one-to-one matching of 8-connected components by descending IoU.

    Returns ``(tp, fp, fn)``.
    """
    pred, gt = _check(pred, gt)
    pl, n_p = ndimage.label(pred, structure=EIGHT_CONNECTED)
    gl, n_g = ndimage.label(gt, structure=EIGHT_CONNECTED)
    if n_p == 0 or n_g == 0:
        return 0, n_p, n_g
    iou = iou_matrix(pl, n_p, gl, n_g)
    pi, gi = np.nonzero(iou >= iou_thresh)
    order = np.lexsort((gi, pi, -iou[pi, gi]))
    used_p, used_g = set(), set()
    for idx in order:
        p, g = pi[idx], gi[idx]
        if p not in used_p and g not in used_g:
            used_p.add(p)
            used_g.add(g)
    tp = len(used_p)
    return tp, n_p - tp, n_g - tp


def object_f1(pred, gt, iou_thresh: float = 0.5) -> float:
    """Detection F1 = 2TP / (2TP + FP + FN); two empty masks score 1.0."""
    tp, fp, fn = match_objects(pred, gt, iou_thresh)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass
class EvalReport:
    per_image: list[dict] = field(default_factory=list)
    aggregate: dict[str, float] = field(default_factory=dict)
    thresholds: dict[str, float | str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def summarize(dice_score: float, f1_score: float) -> dict[str, float]:
    return {"dice": dice_score, "f1": f1_score, "dice_f1_mean": (dice_score + f1_score) / 2}


def evaluate(masks: Mapping[str, np.ndarray], gts: Mapping[str, np.ndarray],
             iou_thresh: float = 0.5, f1_mode: str = "object") -> EvalReport:
    if set(masks) != set(gts):
        missing = sorted(set(gts) - set(masks))
        extra = sorted(set(masks) - set(gts))
        raise KeyError(f"prediction/ground-truth ids differ: missing {missing}, extra {extra}")
    if f1_mode not in ("object", "pixel"):
        raise ValueError("f1_mode must be 'object' or 'pixel'")
    per_image = []
    for key in sorted(gts):
        pred, gt = _check(masks[key], gts[key])
        f1 = object_f1(pred, gt, iou_thresh) if f1_mode == "object" else pixel_f1(pred, gt)
        entry = {"id": key, "dice": dice(pred, gt), "f1": f1}
        if not pred.any() and not gt.any():
            entry["empty"] = True
        per_image.append(entry)
    if per_image:
        agg = summarize(float(np.mean([e["dice"] for e in per_image])),
                        float(np.mean([e["f1"] for e in per_image])))
    else:
        agg = summarize(float("nan"), float("nan"))
    return EvalReport(per_image, agg, {"iou": iou_thresh, "f1_mode": f1_mode, "binarize": 0.5})
