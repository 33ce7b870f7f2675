"""Patch grids, tissue filtering, patch labels, export, augmentation and sampling manifests."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .common import derive_rng
from .preprocess import LabelMask, TissueMask
from .slide_io import Slide

JPEG_QUALITY = 80
PATCH_CSV_FIELDS = ("patch_id", "slide_id", "subject_id", "x", "y", "level", "label",
                    "tissue_fraction", "image_path")


class PhysicalSizeWarning(UserWarning):
    """Patch side in microns is far from the nominal size for its task."""


@dataclass(frozen=True)
class PatchGridSpec:
    patch_px: int = 598
    stride_px: int = 299
    level: int = 0
    min_tissue_fraction: float = 0.5
    edge_tiles: bool = True
    nominal_um: float | None = 300.0
    task: str = "cls"

    def __post_init__(self):
        if not 0 < self.stride_px <= self.patch_px:
            raise ValueError("stride must satisfy 0 < stride <= patch size")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise ValueError("min_tissue_fraction must lie in [0, 1]")

    @classmethod
    def classification(cls, **kw) -> "PatchGridSpec":
        return cls(**{"patch_px": 598, "stride_px": 299, "nominal_um": 300.0, "task": "cls", **kw})

    @classmethod
    def segmentation(cls, **kw) -> "PatchGridSpec":
        return cls(**{"patch_px": 512, "stride_px": 256, "nominal_um": 250.0, "task": "seg", **kw})


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    slide_id: str
    subject_id: str
    x: int
    y: int
    level: int
    label: str  # "pos" | "neg"
    tissue_fraction: float
    image_path: str = ""

    @property
    def positive(self) -> bool:
        return self.label == "pos"


def axis_offsets(dim: int, patch_px: int, stride_px: int, edge_tiles: bool = True) -> list[int]:
    if dim < patch_px:
        return []
    offsets = list(range(0, dim - patch_px + 1, stride_px))
    if edge_tiles and offsets[-1] != dim - patch_px:
        offsets.append(dim - patch_px)
    return offsets


def generate_grid(slide_dims: tuple[int, int], spec: PatchGridSpec) -> list[tuple[int, int]]:
    """Top-left corners, row-major, for a (width, height) level."""
    w, h = slide_dims
    xs = axis_offsets(w, spec.patch_px, spec.stride_px, spec.edge_tiles)
    ys = axis_offsets(h, spec.patch_px, spec.stride_px, spec.edge_tiles)
    return [(x, y) for y in ys for x in xs]


def _axis_weights(start: int, length: int, factor: int, n_cells: int) -> tuple[int, np.ndarray]:
    first = start // factor
    idx = np.arange(start, start + length) // factor - first
    if first + idx[-1] >= n_cells:
        raise ValueError("window extends past the tissue mask")
    return first, np.bincount(idx)


def tissue_fraction(window: tuple[int, int, int, int], tissue: TissueMask) -> float:
    """Fraction of window pixels whose nearest tissue-mask cell is tissue.

    ``window`` is (x, y, w, h) in level-0 pixels.
    """
    x, y, w, h = (int(v) for v in window)
    if x < 0 or y < 0 or w <= 0 or h <= 0:
        raise ValueError(f"invalid window {window}")
    f = tissue.downsample_factor
    c0, wx = _axis_weights(x, w, f, tissue.width)
    r0, wy = _axis_weights(y, h, f, tissue.height)
    block = tissue.mask[r0:r0 + wy.size, c0:c0 + wx.size].astype(np.float64)
    return float(wy @ block @ wx) / float(w * h)


def patch_id_for(slide_id: str, spec: PatchGridSpec, x: int, y: int) -> str:
    return f"{slide_id}_{spec.task}_L{spec.level}_x{x:06d}_y{y:06d}"


def check_physical_size(spec: PatchGridSpec, mpp: float, downsample: float = 1.0) -> float:
    side_um = spec.patch_px * mpp * downsample
    if spec.nominal_um and abs(side_um - spec.nominal_um) > 0.15 * spec.nominal_um:
        warnings.warn(
            f"{spec.patch_px}px patches at {mpp * downsample:.4f} um/px span {side_um:.1f} um, "
            f"more than 15% away from {spec.nominal_um:.0f} um",
            PhysicalSizeWarning, stacklevel=2)
    return side_um


def extract_patches(slide: Slide, label_mask: LabelMask, tissue: TissueMask,
                    spec: PatchGridSpec, out_dir=None) -> list[PatchRecord]:
    """Grid, filter and label the patches of one slide.

    When ``out_dir`` is given each kept patch is also written there as a
    quality-80 JPEG; all labels and fractions come from lossless pixels.
    """
    meta = slide.meta
    w0, h0 = meta.dimensions
    if (label_mask.height, label_mask.width) != (h0, w0):
        raise ValueError("label mask does not match slide level 0")
    f = tissue.downsample_factor
    if (tissue.height, tissue.width) != (math.ceil(h0 / f), math.ceil(w0 / f)):
        raise ValueError("tissue mask does not match slide")
    lv = meta.levels[spec.level]
    ds = int(round(lv.downsample))
    check_physical_size(spec, meta.mpp_x, ds)

    pni = label_mask.pni
    pixels = slide.level_array(spec.level) if out_dir is not None else None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for x, y in generate_grid((lv.width, lv.height), spec):
        # level-0 footprint, clipped to the slide for non-integral downsample edges
        x0, y0 = x * ds, y * ds
        fw, fh = min(spec.patch_px * ds, w0 - x0), min(spec.patch_px * ds, h0 - y0)
        frac = tissue_fraction((x0, y0, fw, fh), tissue)
        if frac < spec.min_tissue_fraction:
            continue
        has_pni = bool(pni[y0:y0 + fh, x0:x0 + fw].any())
        pid = patch_id_for(meta.slide_id, spec, x, y)
        image_path = ""
        if pixels is not None:
            image_path = str(out_dir / f"{pid}.jpg")
            tile = pixels[y:y + spec.patch_px, x:x + spec.patch_px]
            Image.fromarray(np.ascontiguousarray(tile)).save(image_path, quality=JPEG_QUALITY)
        records.append(PatchRecord(pid, meta.slide_id, meta.subject_id, x, y, spec.level,
                                   "pos" if has_pni else "neg", frac, image_path))
    return records


AUGMENTATIONS = ("identity", "hflip", "rot90", "rot180", "rot270")


def augment(patch: np.ndarray, op: str) -> np.ndarray:
    """Dihedral pixel permutation; rotations are counter-clockwise."""
    patch = np.asarray(patch)
    if op not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {op!r}")
    if op == "identity":
        return patch.copy()
    if op == "hflip":
        return patch[:, ::-1].copy()
    if patch.shape[0] != patch.shape[1]:
        raise ValueError("rotations need a square patch")
    return np.rot90(patch, k={"rot90": 1, "rot180": 2, "rot270": 3}[op]).copy()


@dataclass(frozen=True)
class SamplingManifest:
    patch_ids: tuple[str, ...]
    ratio_neg_per_pos: int
    seed: int
    n_positive: int
    n_negative: int

    def header(self) -> dict:
        return {"ratio": self.ratio_neg_per_pos, "seed": self.seed,
                "n_positive": self.n_positive, "n_negative": self.n_negative}

    def dumps(self) -> str:
        return json.dumps(self.header(), sort_keys=True) + "\n" + "".join(p + "\n" for p in self.patch_ids)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SamplingManifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = json.loads(lines[0])
        return cls(tuple(lines[1:]), int(head["ratio"]), int(head["seed"]),
                   int(head["n_positive"]), int(head["n_negative"]))


def build_sampling_manifest(records, ratio: int, seed: int) -> SamplingManifest:
    """One epoch: every positive once plus ``ratio`` negatives per positive, shuffled.

    Negatives are drawn without replacement; if the pool is too small every
    negative is used once and the remainder drawn with replacement.
    """
    ordered = sorted(records, key=lambda r: r.patch_id)
    pos = [r.patch_id for r in ordered if r.positive]
    neg = [r.patch_id for r in ordered if not r.positive]
    if not pos:
        raise ValueError("sampling manifest needs at least one positive patch")
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    need = ratio * len(pos)
    rng = derive_rng(seed, "sampling-manifest")
    if need == 0:
        picked = []
    elif not neg:
        raise ValueError("no negative patches to sample from")
    elif need <= len(neg):
        picked = [neg[i] for i in rng.choice(len(neg), size=need, replace=False)]
    else:
        extra = rng.choice(len(neg), size=need - len(neg), replace=True)
        picked = [neg[i] for i in rng.permutation(len(neg))] + [neg[i] for i in extra]
    entries = pos + picked
    order = rng.permutation(len(entries))
    return SamplingManifest(tuple(entries[i] for i in order), ratio, seed, len(pos), len(picked))


def write_patch_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(PATCH_CSV_FIELDS)
        for r in records:
            wr.writerow([r.patch_id, r.slide_id, r.subject_id, r.x, r.y, r.level, r.label,
                         repr(float(r.tissue_fraction)), r.image_path])


def read_patch_csv(path) -> list[PatchRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != PATCH_CSV_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(PATCH_CSV_FIELDS)}")
        out = []
        for row in rd:
            if row["label"] not in ("pos", "neg"):
                raise ValueError(f"{path}: bad label {row['label']!r}")
            out.append(PatchRecord(row["patch_id"], row["slide_id"], row["subject_id"],
                                   int(row["x"]), int(row["y"]), int(row["level"]), row["label"],
                                   float(row["tissue_fraction"]), row["image_path"]))
    return out
