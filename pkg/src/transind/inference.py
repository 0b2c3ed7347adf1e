"""Two-stage transductive inference.

Stage 1 segments every test patch with templates drawn from the labelled
training patches. Stage 2 segments them again, this time with templates drawn
from the test patches themselves, labelled by their binarized stage-1
predictions and chosen by descriptor similarity to the target.
"""

from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ._io import read_container, write_container
from .checkpoint import Checkpoint
from .config import StageConfig
from .datakit import DataError, ImageRecord, Patch, make_patches, stitch
from .model import JointModel, to_tensor

log = logging.getLogger(__name__)


@dataclass
class StoreEntry:
    prob_map: np.ndarray
    descriptor: np.ndarray
    stage: int

    @property
    def zero_descriptor(self) -> bool:
        return not np.any(self.descriptor)


@dataclass
class PseudoLabelStore:
    entries: dict[str, StoreEntry] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key) -> StoreEntry:
        return self.entries[key]

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def digest(self) -> str:
        h = hashlib.sha256()
        for key in self.ids():
            e = self.entries[key]
            h.update(key.encode())
            h.update(str(e.stage).encode())
            h.update(np.ascontiguousarray(e.prob_map).tobytes())
            h.update(np.ascontiguousarray(e.descriptor).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> Path:
        ids = self.ids()
        arrays = {}
        for i, key in enumerate(ids):
            arrays[f"prob/{i:06d}"] = self.entries[key].prob_map
            arrays[f"desc/{i:06d}"] = self.entries[key].descriptor
        stages = [self.entries[k].stage for k in ids]
        return write_container(path, arrays, {"ids": ids, "stages": stages},
                               kind="pseudo_label_store")

    @classmethod
    def load(cls, path: str | Path) -> "PseudoLabelStore":
        arrays, meta = read_container(path, kind="pseudo_label_store")
        return cls({key: StoreEntry(arrays[f"prob/{i:06d}"], arrays[f"desc/{i:06d}"], stage)
                    for i, (key, stage) in enumerate(zip(meta["ids"], meta["stages"]))})


def _as_model(model: JointModel | Checkpoint) -> JointModel:
    return model.build() if isinstance(model, Checkpoint) else model.eval()


def _dtype(model: JointModel) -> torch.dtype:
    return next(model.parameters()).dtype


def patch_seed(base_seed: int, patch_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, zlib.crc32(patch_id.encode())])


@torch.no_grad()
def segment(model: JointModel, templates: Sequence[tuple[np.ndarray, np.ndarray]],
            targets: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Foreground probabilities and descriptors for ``targets`` given one template set."""
    dtype = _dtype(model)
    out = model(to_tensor([t[0] for t in templates], dtype),
                to_tensor([t[1] for t in templates], dtype),
                to_tensor(list(targets), dtype))
    probs = torch.sigmoid(out.logits)[:, 0]
    return probs.cpu().numpy(), out.descriptors.cpu().numpy()


def draw_templates(pool: Sequence[Patch], n: int, seed) -> list[Patch]:
    if len(pool) < n:
        raise DataError(f"need {n} template patches, only {len(pool)} available")
    idx = np.random.default_rng(seed).choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def run_stage1(model: JointModel | Checkpoint, train_patches: Sequence[Patch],
               test_patches: Sequence[Patch], cfg: StageConfig | None = None
               ) -> PseudoLabelStore:
    cfg = cfg or StageConfig(stage=1)
    pool = [p for p in train_patches if p.mask is not None]
    if not pool:
        raise DataError("stage 1 needs a non-empty labelled training set")
    model = _as_model(model)
    store = PseudoLabelStore()
    for patch in test_patches:
        tpl = draw_templates(pool, cfg.n_templates, patch_seed(cfg.template_seed, patch.id))
        probs, desc = segment(model, [(t.pixels, t.mask) for t in tpl], [patch.pixels])
        store.entries[patch.id] = StoreEntry(probs[0], desc[0], 1)
    log.info("stage 1: %d patches segmented", len(store))
    return store


def rank_candidates(target_id: str, store: PseudoLabelStore, exclude_self: bool = True
                    ) -> list[tuple[str, float]]:
    """All store entries ordered by descending cosine similarity, ties by id."""
    if target_id not in store:
        raise KeyError(f"{target_id} is not in the pseudo-label store")
    query = store[target_id].descriptor.astype(np.float64)
    qn = np.linalg.norm(query)
    ranked = []
    for key in store.ids():
        if exclude_self and key == target_id:
            continue
        d = store[key].descriptor.astype(np.float64)
        denom = qn * np.linalg.norm(d)
        ranked.append((key, float(query @ d / denom) if denom > 0 else 0.0))
    ranked.sort(key=lambda kv: (-kv[1], kv[0]))
    return ranked


def select_templates(target_id: str, store: PseudoLabelStore, cfg: StageConfig
                     ) -> list[tuple[str, np.ndarray]]:
    """Top ``cfg.n_templates`` neighbours of the target with binarized stage-1 masks."""
    ranked = rank_candidates(target_id, store, cfg.exclude_self)
    if len(ranked) < cfg.n_templates:
        raise DataError(f"stage 2 needs {cfg.n_templates} template candidates, "
                        f"only {len(ranked)} available")
    chosen = ranked[:min(cfg.k_candidates, len(ranked))][:cfg.n_templates]
    return [(key, (store[key].prob_map >= cfg.binarize_threshold).astype(np.uint8))
            for key, _ in chosen]


def run_stage2(model: JointModel | Checkpoint, store: PseudoLabelStore,
               test_patches: Sequence[Patch], cfg: StageConfig | None = None
               ) -> PseudoLabelStore:
    """Re-segment each test patch with test-set templates and stage-1 pseudo-labels.

    ``store`` is only read; the result is a new store with ``stage == 2``.
    """
    cfg = cfg or StageConfig(stage=2)
    by_id = {p.id: p for p in test_patches}
    missing = [k for k in by_id if k not in store]
    if missing:
        raise DataError(f"stage-1 store lacks {len(missing)} test patches, e.g. {missing[0]}")
    # candidates must come with pixels, so only the supplied patches compete
    pool = PseudoLabelStore({k: store[k] for k in by_id})
    model = _as_model(model)
    out = PseudoLabelStore()
    for patch in test_patches:
        chosen = select_templates(patch.id, pool, cfg)
        templates = [(by_id[key].pixels, mask) for key, mask in chosen]
        probs, desc = segment(model, templates, [patch.pixels])
        out.entries[patch.id] = StoreEntry(probs[0], desc[0], 2)
        log.debug("stage 2 %s <- %s", patch.id, [k for k, _ in chosen])
    log.info("stage 2: %d patches segmented", len(out))
    return out


@dataclass
class ImageGeometry:
    height: int
    width: int
    patches: list[Patch]


def geometry_of(records: Sequence[ImageRecord], size: int, overlap: int
                ) -> dict[str, ImageGeometry]:
    return {r.id: ImageGeometry(*r.shape, make_patches(r, size, overlap)) for r in records}


def assemble_probabilities(store: PseudoLabelStore, geometry: dict[str, ImageGeometry]
                           ) -> dict[str, np.ndarray]:
    out = {}
    for image_id, geo in geometry.items():
        items = []
        for p in geo.patches:
            if p.id not in store:
                raise DataError(f"store has no prediction for patch {p.id}")
            items.append((p, store[p.id].prob_map))
        out[image_id] = stitch(items, geo.height, geo.width)
    return out


def assemble(store: PseudoLabelStore, geometry: dict[str, ImageGeometry],
             threshold: float = 0.5) -> dict[str, np.ndarray]:
    """Stitch patch probabilities per image and binarize (ties are foreground)."""
    return {k: (v >= threshold).astype(np.uint8)
            for k, v in assemble_probabilities(store, geometry).items()}


def save_mask_png(mask: np.ndarray, path: str | Path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path, optimize=False)
    return path


def load_mask_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)
