"""Deterministic synthetic cohorts: slides, PNI annotations, truth masks, cohort CSV.

Tissue is one thresholded low-frequency noise blob drawn on a 16-px cell
lattice with a checkerboard stipple, so it survives the x16 thumbnail with
strong Laplacian texture.  PNI foci are dark rings placed well inside the
tissue, each annotated by a circular polygon.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .common import derive_rng
from .preprocess import TISSUE_DOWNSAMPLE, AnnotationSet, LabelMask, Polygon, rasterize_labels, tissue_mask
from .slide_io import MPP_APERIO, Slide, write_slide

COHORT_CSV_FIELDS = ("subject_id", "slide_id", "pni_truth")
PNI_SUBJECT_PREVALENCE = 266 / 1427  # 18.6% of subjects

BACKGROUND_RGB = (255, 255, 255)
TISSUE_RGB = (200, 120, 170)
STIPPLE_AMPLITUDE = 45.0
RING_RGB = (80, 30, 100)
NERVE_RGB = (235, 195, 220)
FOCUS_VERTICES = 32


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class CohortSpec:
    seed: int = 0
    n_subjects: int = 20
    slides_per_subject: tuple[int, int] = (1, 2)
    subject_pni_prevalence: float = round(PNI_SUBJECT_PREVALENCE, 3)
    foci_per_positive_slide: tuple[int, int] = (1, 2)
    focus_radius_px: tuple[int, int] = (24, 40)
    slide_dims: tuple[int, int] = (2048, 2048)
    mpp: float = MPP_APERIO
    # chance that each further slide of a positive subject also carries PNI
    positive_slide_fraction: float = 1.0
    patch_px: int = 598
    # clearance between a focus centre and the tissue edge
    focus_margin_px: int | None = None
    # (patch_px, stride_px) grids in which every PNI pixel must lie in some
    # patch with true tissue fraction >= coverage_min_tissue; empty disables
    coverage_grids: tuple[tuple[int, int], ...] = ((598, 299), (512, 256))
    coverage_min_tissue: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.subject_pni_prevalence <= 1.0:
            raise ValueError("prevalence must lie in [0, 1]")
        w, h = self.slide_dims
        if w < 2 * self.patch_px or h < 2 * self.patch_px:
            raise ValueError("slide dimensions must be at least twice the patch size")
        for lo, hi in (self.slides_per_subject, self.foci_per_positive_slide, self.focus_radius_px):
            if lo > hi:
                raise ValueError("empty range")
        if self.slides_per_subject[0] < 1:
            raise ValueError("each subject needs a slide")

    @property
    def margin(self) -> int:
        if self.focus_margin_px is not None:
            return self.focus_margin_px
        return self.focus_radius_px[1] + 2 * TISSUE_DOWNSAMPLE

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SyntheticSlide:
    slide_id: str
    subject_id: str
    rgb: np.ndarray  # level 0
    tissue_cells: np.ndarray  # bool, generator's tissue at x16 resolution
    annotations: AnnotationSet

    @property
    def positive(self) -> bool:
        return bool(self.annotations.polygons)

    def tissue_truth(self) -> np.ndarray:
        h, w = self.rgb.shape[:2]
        f = TISSUE_DOWNSAMPLE
        return np.repeat(np.repeat(self.tissue_cells, f, 0), f, 1)[:h, :w]


@dataclass(frozen=True)
class CohortEntry:
    subject_id: str
    slide_id: str
    pni_truth: bool


def _blob(rng: np.random.Generator, cells: tuple[int, int]) -> np.ndarray:
    ch, cw = cells
    noise = rng.normal(size=(6, 6))
    smooth = ndimage.zoom(noise, (ch / 6, cw / 6), order=3, mode="nearest")[:ch, :cw]
    yy, xx = np.mgrid[0:ch, 0:cw]
    cy, cx = (ch - 1) / 2 + rng.uniform(-0.05, 0.05) * ch, (cw - 1) / 2 + rng.uniform(-0.05, 0.05) * cw
    ry, rx = ch * rng.uniform(0.36, 0.42), cw * rng.uniform(0.36, 0.42)
    field = 1.0 - ((yy - cy) / ry) ** 2 - ((xx - cx) / rx) ** 2 + 0.3 * smooth
    blob = field > 0
    blob[:2, :] = blob[-2:, :] = False
    blob[:, :2] = blob[:, -2:] = False
    lab, n = ndimage.label(blob)
    if n == 0:
        raise SynthError("generated tissue is empty")
    sizes = ndimage.sum_labels(blob, lab, index=np.arange(1, n + 1))
    return lab == (int(np.argmax(sizes)) + 1)


def _render_tissue(rng: np.random.Generator, cells: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    ch, cw = cells.shape
    parity = (np.add.outer(np.arange(ch), np.arange(cw)) % 2) * 2 - 1
    jitter = rng.normal(0.0, 6.0, size=(ch, cw))
    shade = parity * STIPPLE_AMPLITUDE + jitter
    colour = np.asarray(TISSUE_RGB, dtype=np.float64)[None, None, :] * (1.0 + shade[..., None] / 150.0)
    colour = np.where(cells[..., None], colour, np.asarray(BACKGROUND_RGB, dtype=np.float64))
    colour = np.clip(np.rint(colour), 0, 255).astype(np.uint8)
    f = TISSUE_DOWNSAMPLE
    w, h = dims
    return np.repeat(np.repeat(colour, f, 0), f, 1)[:h, :w].copy()


def _covered(cells: np.ndarray, dims, grids, min_tissue: float, box) -> bool:
    """Every pixel of ``box`` lies in a grid patch whose cell-level tissue fraction passes."""
    from .tiler import axis_offsets

    f = TISSUE_DOWNSAMPLE
    w, h = dims
    bx0, by0, bx1, by1 = box
    truth = np.repeat(np.repeat(cells, f, 0), f, 1)[:h, :w]
    for patch, stride in grids:
        hit = np.zeros((by1 - by0, bx1 - bx0), dtype=bool)
        xs = [x for x in axis_offsets(w, patch, stride) if x < bx1 and x + patch > bx0]
        ys = [y for y in axis_offsets(h, patch, stride) if y < by1 and y + patch > by0]
        for y in ys:
            for x in xs:
                if truth[y:y + patch, x:x + patch].mean() >= min_tissue:
                    hit[max(y - by0, 0):y + patch - by0, max(x - bx0, 0):x + patch - bx0] = True
        if not hit.all():
            return False
    return True


def _focus_centres(rng, cells: np.ndarray, radii, spec: "CohortSpec") -> list[tuple[float, float]]:
    f = TISSUE_DOWNSAMPLE
    margin = spec.margin
    half = int(math.ceil(margin / f))
    allowed = ndimage.binary_erosion(cells, structure=np.ones((2 * half + 1, 2 * half + 1), bool),
                                     border_value=0)
    ys, xs = np.nonzero(allowed)
    if ys.size == 0:
        raise SynthError(f"no tissue location leaves a {margin}px margin for a PNI focus")
    w, h = spec.slide_dims
    centres: list[tuple[float, float]] = []
    for _ in range(200):
        if len(centres) == len(radii):
            break
        r = radii[len(centres)]
        k = int(rng.integers(ys.size))
        cx = float(xs[k] * f + rng.uniform(0, f))
        cy = float(ys[k] * f + rng.uniform(0, f))
        if not (r + 1 <= cx <= w - r - 1 and r + 1 <= cy <= h - r - 1):
            continue
        if any(math.hypot(cx - ox, cy - oy) <= 3 * spec.focus_radius_px[1] for ox, oy in centres):
            continue
        box = (int(cx - r) - 1, int(cy - r) - 1, int(cx + r) + 2, int(cy + r) + 2)
        if spec.coverage_grids and not _covered(cells, (w, h), spec.coverage_grids,
                                                spec.coverage_min_tissue, box):
            continue
        centres.append((cx, cy))
    if len(centres) < len(radii):
        raise SynthError(f"could not place {len(radii)} separated PNI foci inside tissue")
    return centres


def _draw_focus(rgb: np.ndarray, cx: float, cy: float, r: float) -> None:
    h, w = rgb.shape[:2]
    x0, x1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, w)
    y0, y1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, h)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy)
    win = rgb[y0:y1, x0:x1]
    win[(d <= r) & (d >= 0.55 * r)] = RING_RGB
    win[d < 0.55 * r] = NERVE_RGB


def circle_polygon(cx: float, cy: float, r: float, n: int = FOCUS_VERTICES) -> Polygon:
    ang = 2 * np.pi * np.arange(n) / n
    return Polygon(tuple((round(cx + r * math.cos(a), 3), round(cy + r * math.sin(a), 3)) for a in ang))


def generate_slide(spec: CohortSpec, slide_id: str, subject_id: str, n_foci: int) -> SyntheticSlide:
    rng = derive_rng(spec.seed, "slide", slide_id)
    w, h = spec.slide_dims
    f = TISSUE_DOWNSAMPLE
    cells = _blob(rng, (math.ceil(h / f), math.ceil(w / f)))
    rgb = _render_tissue(rng, cells, spec.slide_dims)
    polys = []
    if n_foci:
        radii = [float(rng.uniform(*spec.focus_radius_px)) for _ in range(n_foci)]
        for (cx, cy), r in zip(_focus_centres(rng, cells, radii, spec), radii):
            _draw_focus(rgb, cx, cy, r)
            polys.append(circle_polygon(cx, cy, r))
    return SyntheticSlide(slide_id, subject_id, rgb, cells, AnnotationSet(slide_id, tuple(polys)))


def cohort_plan(spec: CohortSpec) -> list[tuple[CohortEntry, int]]:
    """Subjects, slides and focus counts, before any pixels are drawn."""
    rng = derive_rng(spec.seed, "cohort")
    plan = []
    for s in range(spec.n_subjects):
        subject_id = f"P{s:04d}"
        positive = bool(rng.random() < spec.subject_pni_prevalence)
        n_slides = int(rng.integers(spec.slides_per_subject[0], spec.slides_per_subject[1] + 1))
        lead = int(rng.integers(n_slides))
        for k in range(n_slides):
            slide_pos = positive and (k == lead or bool(rng.random() < spec.positive_slide_fraction))
            n_foci = (int(rng.integers(spec.foci_per_positive_slide[0], spec.foci_per_positive_slide[1] + 1))
                      if slide_pos else 0)
            slide_pos = slide_pos and n_foci > 0
            plan.append((CohortEntry(subject_id, f"{subject_id}_S{k}", slide_pos), n_foci))
    return plan


@dataclass(frozen=True)
class CohortLayout:
    root: Path

    @property
    def cohort_csv(self) -> Path:
        return self.root / "cohort.csv"

    def slide_dir(self, slide_id: str) -> Path:
        return self.root / "slides" / slide_id

    def annotations(self, slide_id: str) -> Path:
        return self.root / "annotations" / f"{slide_id}.json"

    def truth_labels(self, slide_id: str) -> Path:
        return self.root / "truth" / f"{slide_id}_labels.png"

    def truth_tissue(self, slide_id: str) -> Path:
        return self.root / "truth" / f"{slide_id}_tissue.png"


def write_synthetic_slide(layout: CohortLayout, syn: SyntheticSlide, spec: CohortSpec) -> Slide:
    slide = write_slide(layout.slide_dir(syn.slide_id), syn.rgb, syn.slide_id, syn.subject_id,
                        mpp=spec.mpp, scanner_tag="synthetic")
    layout.annotations(syn.slide_id).parent.mkdir(parents=True, exist_ok=True)
    syn.annotations.save(layout.annotations(syn.slide_id))
    layout.truth_labels(syn.slide_id).parent.mkdir(parents=True, exist_ok=True)
    labels = rasterize_labels(slide, syn.annotations, tissue_mask(slide))
    labels.save(layout.truth_labels(syn.slide_id))
    Image.fromarray(syn.tissue_cells.astype(np.uint8) * 255).save(layout.truth_tissue(syn.slide_id))
    return slide


def generate_cohort(spec: CohortSpec, out_dir) -> list[CohortEntry]:
    layout = CohortLayout(Path(out_dir))
    layout.root.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry, n_foci in cohort_plan(spec):
        syn = generate_slide(spec, entry.slide_id, entry.subject_id, n_foci)
        write_synthetic_slide(layout, syn, spec)
        entries.append(entry)
    write_cohort_csv(entries, layout.cohort_csv)
    return entries


def write_cohort_csv(entries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(COHORT_CSV_FIELDS)
        for e in entries:
            wr.writerow([e.subject_id, e.slide_id, int(e.pni_truth)])


def read_cohort_csv(path) -> list[CohortEntry]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != COHORT_CSV_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(COHORT_CSV_FIELDS)}")
        out = []
        for row in rd:
            if row["pni_truth"] not in ("0", "1"):
                raise ValueError(f"{path}: pni_truth must be 0 or 1")
            out.append(CohortEntry(row["subject_id"], row["slide_id"], row["pni_truth"] == "1"))
    return out


def load_truth_labels(layout: CohortLayout, slide_id: str) -> LabelMask:
    return LabelMask.load(layout.truth_labels(slide_id), slide_id)
