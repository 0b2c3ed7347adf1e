"""Dataset ingestion, synthetic data, patching/stitching, augmentation, episodes."""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import ndimage

from ._io import read_container, write_container

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
SOURCES = ("train", "test", "synthetic")


class DataError(ValueError):
    """Raised for malformed or insufficient input data."""


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray | None  # H x W, uint8 in {0, 1}
    source: str = "train"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"{self.id}: pixels must be H x W x 3, got {self.pixels.shape}")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise DataError(f"{self.id}: mask shape {self.mask.shape} != image shape "
                            f"{self.pixels.shape[:2]}")
        if self.source not in SOURCES:
            raise DataError(f"{self.id}: unknown source {self.source!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class Patch:
    parent_id: str
    x0: int
    y0: int
    size: int
    pixels: np.ndarray
    mask: np.ndarray | None

    @property
    def id(self) -> str:
        # zero padding keeps lexicographic order equal to row-major order
        return f"{self.parent_id}@{self.y0:05d}_{self.x0:05d}"


@dataclass
class Episode:
    templates: list[tuple[np.ndarray, np.ndarray]]
    targets: list[tuple[np.ndarray, np.ndarray | None]]
    template_ids: list[str] = field(default_factory=list)
    target_ids: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# MoNuSeg ingestion

def rasterize_polygons(polygons: Iterable[np.ndarray], height: int, width: int) -> np.ndarray:
    """Union of polygons sampled at pixel centres.

    A pixel ``(row, col)`` is on iff ``(col + 0.5, row + 0.5)`` is inside a
    polygon under the even-odd rule, with points on an edge counted inside.
    Vertices are ``(x, y)`` pairs in pixel units.
    """
    mask = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        poly = np.asarray(poly, dtype=np.float64)
        if len(poly) < 3:
            continue
        x_lo = max(int(np.floor(poly[:, 0].min() - 0.5)), 0)
        x_hi = min(int(np.ceil(poly[:, 0].max() + 0.5)), width)
        y_lo = max(int(np.floor(poly[:, 1].min() - 0.5)), 0)
        y_hi = min(int(np.ceil(poly[:, 1].max() + 0.5)), height)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        px, py = np.meshgrid(np.arange(x_lo, x_hi) + 0.5, np.arange(y_lo, y_hi) + 0.5)
        inside = np.zeros(px.shape, dtype=bool)
        on_edge = np.zeros(px.shape, dtype=bool)
        x1, y1 = poly[:, 0], poly[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        for ax, ay, bx, by in zip(x1, y1, x2, y2):
            crosses = (ay > py) != (by > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_int = ax + (py - ay) * (bx - ax) / (by - ay)
            inside ^= crosses & (px < x_int)
            cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            within = ((px >= min(ax, bx) - 1e-9) & (px <= max(ax, bx) + 1e-9)
                      & (py >= min(ay, by) - 1e-9) & (py <= max(ay, by) + 1e-9))
            on_edge |= (np.abs(cross) <= 1e-9) & within
        mask[y_lo:y_hi, x_lo:x_hi] |= inside | on_edge
    return mask.astype(np.uint8)


def parse_monuseg_xml(path: str | Path) -> tuple[list[np.ndarray], int]:
    """Read polygon regions from a MoNuSeg annotation file.

    Returns the valid polygons and the number of regions skipped for having
    fewer than three vertices.
    """
    root = ET.parse(path).getroot()
    polygons, skipped = [], 0
    for region in root.iter("Region"):
        verts = [(float(v.get("X")), float(v.get("Y"))) for v in region.iter("Vertex")]
        if len(verts) < 3:
            skipped += 1
            continue
        polygons.append(np.array(verts))
    return polygons, skipped


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass
class IngestSummary:
    nucleus_counts: dict[str, int] = field(default_factory=dict)
    skipped_regions: dict[str, int] = field(default_factory=dict)
    empty_annotations: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def total_nuclei(self) -> int:
        return sum(self.nucleus_counts.values())


def ingest_monuseg(image_dir: str | Path, annotation_dir: str | Path,
                   source: str = "train") -> tuple[list[ImageRecord], IngestSummary]:
    """Load every image in ``image_dir`` with its same-stem XML annotation.

    Images without an annotation are reported in ``summary.errors`` and
    skipped; the remaining records are still returned.
    """
    image_dir, annotation_dir = Path(image_dir), Path(annotation_dir)
    summary = IngestSummary()
    records = []
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    for img_path in images:
        stem = img_path.stem
        xml_path = annotation_dir / f"{stem}.xml"
        if not xml_path.exists():
            summary.errors[stem] = f"missing annotation {xml_path.name}"
            log.error("record %s: missing annotation %s", stem, xml_path)
            continue
        pixels = load_image(img_path)
        polygons, skipped = parse_monuseg_xml(xml_path)
        mask = rasterize_polygons(polygons, *pixels.shape[:2])
        summary.nucleus_counts[stem] = len(polygons)
        if skipped:
            summary.skipped_regions[stem] = skipped
        if not polygons:
            summary.empty_annotations.append(stem)
            log.warning("record %s: annotation has no usable regions", stem)
        records.append(ImageRecord(stem, pixels, mask, source,
                                   meta={"n_nuclei": len(polygons)}))
    if summary.skipped_regions:
        log.warning("skipped %d degenerate regions (<3 vertices) in %d files",
                    sum(summary.skipped_regions.values()), len(summary.skipped_regions))
    return records, summary


# ---------------------------------------------------------------------------
# record cache

def save_record(record: ImageRecord, path: str | Path) -> Path:
    arrays = {"pixels": record.pixels}
    if record.mask is not None:
        arrays["mask"] = record.mask
    return write_container(path, arrays, {"id": record.id, "source": record.source,
                                          "record_meta": record.meta}, kind="record")


def load_record(path: str | Path) -> ImageRecord:
    arrays, meta = read_container(path, kind="record")
    return ImageRecord(meta["id"], arrays["pixels"], arrays.get("mask"), meta["source"],
                       meta.get("record_meta", {}))


def save_records(records: Sequence[ImageRecord], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("record ids must be unique within a dataset")
    return [save_record(r, directory / f"{r.id}.npz") for r in records]


def load_records(directory: str | Path) -> list[ImageRecord]:
    paths = sorted(Path(directory).glob("*.npz"))
    return [load_record(p) for p in paths]


# ---------------------------------------------------------------------------
# patching

def patch_offsets(length: int, size: int, overlap: int) -> list[int]:
    step = size - overlap
    offsets = list(range(0, length - size + 1, step))
    if offsets[-1] != length - size:
        offsets.append(length - size)
    return offsets


def make_patches(record: ImageRecord, size: int = 256, overlap: int = 128) -> list[Patch]:
    H, W = record.shape
    if size > min(H, W):
        raise DataError(f"{record.id}: patch size {size} exceeds image size {H}x{W}")
    if not 0 <= overlap < size:
        raise DataError(f"overlap must satisfy 0 <= overlap < size, got {overlap}")
    patches = []
    for y0 in patch_offsets(H, size, overlap):
        for x0 in patch_offsets(W, size, overlap):
            mask = None if record.mask is None else record.mask[y0:y0 + size, x0:x0 + size]
            patches.append(Patch(record.id, x0, y0, size,
                                 record.pixels[y0:y0 + size, x0:x0 + size], mask))
    return patches


def stitch(items: Sequence[tuple[Patch, np.ndarray]], height: int, width: int) -> np.ndarray:
    """Average overlapping patch score maps back onto an ``height x width`` canvas."""
    total = np.zeros((height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int64)
    for patch, scores in items:
        s = patch.size
        total[patch.y0:patch.y0 + s, patch.x0:patch.x0 + s] += scores
        count[patch.y0:patch.y0 + s, patch.x0:patch.x0 + s] += 1
    if not count.all():
        r, c = np.argwhere(count == 0)[0]
        raise DataError(f"pixel (row={r}, col={c}) is not covered by any patch")
    return total / count


# ---------------------------------------------------------------------------
# augmentation: the dihedral group of the square
#   0 identity, 1-3 rotation by 90/180/270 degrees, 4 vertical flip,
#   5 horizontal flip, 6 transpose, 7 anti-transpose

DIHEDRAL = ("identity", "rot90", "rot180", "rot270", "flip_ud", "flip_lr",
            "transpose", "antitranspose")


def apply_dihedral(arr: np.ndarray, element: int) -> np.ndarray:
    """Act on the two leading (row, col) axes of ``arr``.

    ``rot90`` sends the pixel at (0, 0) to (0, S-1).
    """
    if element < 4:
        out = np.rot90(arr, -element, axes=(0, 1))
    elif element == 4:
        out = arr[::-1]
    elif element == 5:
        out = arr[:, ::-1]
    elif element == 6:
        out = np.swapaxes(arr, 0, 1)
    elif element == 7:
        out = np.swapaxes(arr[::-1, ::-1], 0, 1)
    else:
        raise ValueError(f"dihedral element must be in 0..7, got {element}")
    return np.ascontiguousarray(out)


def dihedral_inverse(element: int) -> int:
    return (4 - element) % 4 if element < 4 else element


def augment(pixels: np.ndarray, mask: np.ndarray | None, seed) -> tuple[np.ndarray, np.ndarray | None]:
    element = int(np.random.default_rng(seed).integers(8))
    out_mask = None if mask is None else apply_dihedral(mask, element)
    return apply_dihedral(pixels, element), out_mask


# ---------------------------------------------------------------------------
# synthetic nuclei

@dataclass(frozen=True)
class SynthStyle:
    background: tuple[float, float, float] = (0.88, 0.66, 0.80)
    nucleus: tuple[float, float, float] = (0.36, 0.20, 0.55)
    texture: float = 0.06
    noise: float = 0.02


AXIS_DIVISOR = 2

SHIFTED_STYLE = SynthStyle(background=(0.78, 0.70, 0.58), nucleus=(0.50, 0.36, 0.54),
                           texture=0.10, noise=0.07)


def _lerp(a, b, t):
    return tuple((1 - t) * x + t * y for x, y in zip(a, b))


def style_for_shift(shift: float) -> SynthStyle:
    """Interpolate between the reference and the shifted appearance."""
    base, far = SynthStyle(), SHIFTED_STYLE
    return SynthStyle(_lerp(base.background, far.background, shift),
                      _lerp(base.nucleus, far.nucleus, shift),
                      (1 - shift) * base.texture + shift * far.texture,
                      (1 - shift) * base.noise + shift * far.noise)


def ellipse_mask(ellipses: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    """Union of filled ellipses ``(cx, cy, a, b, theta)`` sampled at pixel centres."""
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    mask = np.zeros((height, width), dtype=bool)
    for cx, cy, a, b, theta in ellipses:
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask.astype(np.uint8)


def jitter_style(style: SynthStyle, rng: np.random.Generator, amount: float) -> SynthStyle:
    """Random per-image stain variation of the given magnitude."""
    if amount <= 0:
        return style
    bg = np.clip(np.asarray(style.background) + rng.normal(0, amount, 3), 0.3, 1.0)
    nuc = np.clip(np.asarray(style.nucleus) + rng.normal(0, amount, 3), 0.0, 0.9)
    noise = style.noise * float(np.exp(rng.normal(0, amount * 4)))
    return SynthStyle(tuple(bg), tuple(nuc), style.texture, noise)


def _synth_one(rng: np.random.Generator, height: int, width: int, style: SynthStyle):
    n = int(rng.integers(5, 31))
    # axis lengths 4-16 px, stored as semi-axes
    axes = rng.uniform(4, 16, size=(n, 2)) / AXIS_DIVISOR
    centres = rng.uniform((0, 0), (width, height), size=(n, 2))
    angles = rng.uniform(0, np.pi, size=n)
    ellipses = [(float(cx), float(cy), float(a), float(b), float(t))
                for (cx, cy), (a, b), t in zip(centres, axes, angles)]
    mask = ellipse_mask(ellipses, height, width)

    texture = ndimage.gaussian_filter(rng.standard_normal((height, width)), 2.0)
    texture = style.texture * texture / (texture.std() + 1e-12)
    img = np.empty((height, width, 3))
    img[:] = style.background
    # per-image stain strength jitter
    tint = rng.normal(0.0, 0.03, size=3)
    nuc = np.clip(np.asarray(style.nucleus) + tint, 0, 1)
    img[mask.astype(bool)] = nuc
    chroma = ndimage.gaussian_filter(rng.standard_normal((height, width)), 1.0)
    img += texture[..., None] + 0.5 * style.texture * chroma[..., None] * mask[..., None]
    img += rng.normal(0.0, style.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask, ellipses


def synth_generate(n_images: int, height: int = 256, width: int = 256, seed: int = 0,
                   shift: float = 0.0, jitter: float = 0.0, source: str = "synthetic",
                   prefix: str = "synth") -> list[ImageRecord]:
    """Generate ``n_images`` H&E-like tiles with elliptical nuclei.

    ``shift`` in [0, 1] moves background hue, nucleus stain, texture and noise
    toward an alternative appearance to emulate a train/test domain gap.
    ``jitter`` adds independent per-image stain variation on top.
    """
    if height < 64 or width < 64:
        raise DataError(f"synthetic images must be at least 64x64, got {height}x{width}")
    style = style_for_shift(shift)
    seeds = np.random.SeedSequence(seed).spawn(n_images)
    records = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        img_style = jitter_style(style, rng, jitter)
        pixels, mask, ellipses = _synth_one(rng, height, width, img_style)
        records.append(ImageRecord(f"{prefix}{i:04d}", pixels, mask, source,
                                   meta={"ellipses": ellipses, "shift": shift,
                                         "jitter": jitter}))
    return records


# ---------------------------------------------------------------------------
# episodes

def patchify(records: Sequence[ImageRecord], size: int, overlap: int) -> list[Patch]:
    out = []
    for r in records:
        out.extend(make_patches(r, size, overlap))
    return out


def sample_episode(patches: Sequence[Patch], n_templates: int = 5, n_targets: int = 5,
                   seed=0, augmentation: bool = True, group_by: str | None = None) -> Episode:
    """Draw disjoint template and target patches, each independently augmented.

    ``group_by="parent"`` first picks one source image (among those with
    enough patches) and draws the whole episode from it.
    """
    labelled = [p for p in patches if p.mask is not None]
    need = n_templates + n_targets
    if n_templates < 1 or n_targets < 1:
        raise DataError("an episode needs at least one template and one target")
    if len(labelled) < need:
        raise DataError(f"episode needs {need} labelled patches, only {len(labelled)} available")
    ss = np.random.SeedSequence(seed)
    pick_ss, aug_ss = ss.spawn(2)
    rng = np.random.default_rng(pick_ss)
    if group_by == "parent":
        groups: dict[str, list[Patch]] = {}
        for p in labelled:
            groups.setdefault(p.parent_id, []).append(p)
        eligible = sorted(k for k, v in groups.items() if len(v) >= need)
        if not eligible:
            raise DataError(f"no source image has the {need} patches a grouped episode needs")
        labelled = groups[eligible[rng.integers(len(eligible))]]
    elif group_by is not None:
        raise ValueError(f"unknown episode grouping {group_by!r}")
    idx = rng.choice(len(labelled), size=need, replace=False)
    aug_seeds = aug_ss.spawn(need)
    chosen = []
    for j, i in enumerate(idx):
        p = labelled[i]
        pix, m = (augment(p.pixels, p.mask, aug_seeds[j]) if augmentation
                  else (p.pixels, p.mask))
        chosen.append((p.id, pix, m))
    tpl, tgt = chosen[:n_templates], chosen[n_templates:]
    return Episode([(c[1], c[2]) for c in tpl], [(c[1], c[2]) for c in tgt],
                   [c[0] for c in tpl], [c[0] for c in tgt])
