"""Tissue segmentation, annotation rasterization and section splitting.

Tissue detection runs on a x16 block-mean thumbnail: NTSC grayscale, absolute
4-neighbour Laplacian (replicate borders), then Otsu on a 256-bin histogram
of the response scaled linearly onto [0, 255].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .common import round_half_away
from .slide_io import RasterImage, Region, Slide, downsample

TISSUE_DOWNSAMPLE = 16
NTSC_WEIGHTS = (0.2989, 0.5870, 0.1140)

BACKGROUND, TISSUE, PNI = 0, 1, 2


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TissueMask:
    mask: np.ndarray  # bool, (h, w) at thumbnail resolution
    slide_id: str = ""
    downsample_factor: int = TISSUE_DOWNSAMPLE

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    def save(self, path) -> None:
        Image.fromarray(self.mask.astype(np.uint8) * 255).save(path)

    @classmethod
    def load(cls, path, slide_id: str = "") -> "TissueMask":
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
        if not np.isin(arr, (0, 255)).all():
            raise ValueError(f"{path}: tissue mask must contain only 0/255")
        return cls(arr > 0, slide_id)


@dataclass(frozen=True, eq=False)
class LabelMask:
    labels: np.ndarray  # uint8 in {0, 1, 2}
    slide_id: str = ""
    level: int = 0

    def __post_init__(self):
        if self.labels.dtype != np.uint8 or self.labels.ndim != 2:
            raise ValueError("label mask must be a 2-D uint8 array")
        if self.labels.size and self.labels.max() > PNI:
            raise ValueError("label mask values must be 0, 1 or 2")

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def pni(self) -> np.ndarray:
        return self.labels == PNI

    def save(self, path) -> None:
        Image.fromarray(self.labels).save(path)

    @classmethod
    def load(cls, path, slide_id: str = "") -> "LabelMask":
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise ValueError(f"{path}: label mask must be 8-bit single channel")
            arr = np.asarray(im, dtype=np.uint8).copy()
        return cls(arr, slide_id)


@dataclass(frozen=True)
class Polygon:
    points: tuple[tuple[float, float], ...]
    cls: str = "PNI"

    def __post_init__(self):
        if len(self.points) < 3:
            raise AnnotationError("polygon needs at least 3 vertices")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64)


@dataclass(frozen=True)
class AnnotationSet:
    slide_id: str
    polygons: tuple[Polygon, ...] = ()

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "polygons": [{"class": p.cls, "points": [list(pt) for pt in p.points]}
                         for p in self.polygons],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "AnnotationSet":
        try:
            polys = tuple(
                Polygon(tuple((float(x), float(y)) for x, y in p["points"]), str(p.get("class", "PNI")))
                for p in payload["polygons"]
            )
            return cls(str(payload["slide_id"]), polys)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, AnnotationError):
                raise
            raise AnnotationError(f"malformed annotation file: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AnnotationSet":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def to_grayscale(image) -> RasterImage:
    px = image.pixels if isinstance(image, RasterImage) else np.asarray(image)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError("grayscale conversion needs a 3-channel image")
    r, g, b = (px[..., c].astype(np.float64) for c in range(3))
    gray = NTSC_WEIGHTS[0] * r + NTSC_WEIGHTS[1] * g + NTSC_WEIGHTS[2] * b
    return RasterImage(np.clip(round_half_away(gray), 0, 255).astype(np.uint8))


def laplacian_response(gray) -> np.ndarray:
    px = gray.pixels if isinstance(gray, RasterImage) else np.asarray(gray)
    if px.ndim != 2:
        raise ValueError("Laplacian needs a single-channel image")
    if px.size == 0:
        raise ValueError("empty image")
    p = np.pad(px.astype(np.float64), 1, mode="edge")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * p[1:-1, 1:-1]
    return np.abs(lap)


def scale_to_bins(values: np.ndarray) -> np.ndarray:
    """Map values linearly from [min, max] onto integer bins 0..255."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return round_half_away((v - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def otsu_from_histogram(hist) -> int:
    """Smallest t maximizing between-class variance for classes [0..t] and (t..]."""
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    bins = np.arange(hist.size, dtype=np.float64)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * bins)
    w1 = total - w0
    mu_t = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        # (mu_T w0 - m0)^2 / (w0 w1) is proportional to the between-class variance
        var_b = (mu_t * w0 / total - m0) ** 2 / (w0 * w1)
    var_b[~np.isfinite(var_b)] = -1.0
    if var_b.max() < 0:
        return int(np.flatnonzero(hist)[0])
    return int(np.argmax(var_b))


def otsu_threshold(values) -> int:
    """Otsu threshold of integer values in 0..255; foreground is ``value > t``.

    When every value is identical the threshold is that value, which leaves
    the foreground empty.
    """
    v = np.asarray(values).ravel()
    if v.size == 0:
        raise ValueError("no values to threshold")
    if v.min() < 0 or v.max() > 255:
        raise ValueError("values must lie in 0..255")
    hist = np.bincount(v.astype(np.int64), minlength=256)
    return otsu_from_histogram(hist)


def thumbnail(slide: Slide, factor: int = TISSUE_DOWNSAMPLE) -> RasterImage:
    """x``factor`` block-mean thumbnail of level 0, reusing a stored level when it matches."""
    for k, lv in enumerate(slide.meta.levels):
        if lv.downsample == factor:
            return RasterImage(np.asarray(slide.level_array(k)))
    return downsample(RasterImage(np.asarray(slide.level_array(0))), factor)


def tissue_mask_from_thumbnail(thumb: RasterImage, slide_id: str = "") -> TissueMask:
    gray = to_grayscale(thumb) if thumb.channels == 3 else thumb
    bins = scale_to_bins(laplacian_response(gray))
    t = otsu_threshold(bins)
    return TissueMask(bins > t, slide_id)


def tissue_mask(slide: Slide) -> TissueMask:
    tm = tissue_mask_from_thumbnail(thumbnail(slide), slide.slide_id)
    w, h = slide.meta.dimensions
    assert tm.mask.shape == (math.ceil(h / TISSUE_DOWNSAMPLE), math.ceil(w / TISSUE_DOWNSAMPLE))
    return tm


def upsample_nearest(mask: np.ndarray, factor: int, shape: tuple[int, int]) -> np.ndarray:
    up = np.repeat(np.repeat(mask, factor, axis=0), factor, axis=1)
    return up[:shape[0], :shape[1]]


def polygon_pixels(points: np.ndarray, shape: tuple[int, int]) -> tuple[slice, slice, np.ndarray]:
    """Even-odd rasterization of a polygon over pixel centres.

    Returns the bounding-box slices and the boolean coverage inside them.
    """
    h, w = shape
    xs, ys = points[:, 0], points[:, 1]
    x0 = max(int(math.floor(xs.min() - 0.5)), 0)
    x1 = min(int(math.ceil(xs.max() - 0.5)) + 1, w)
    y0 = max(int(math.floor(ys.min() - 0.5)), 0)
    y1 = min(int(math.ceil(ys.max() - 0.5)) + 1, h)
    if x1 <= x0 or y1 <= y0:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0), dtype=bool)
    cx = np.arange(x0, x1, dtype=np.float64) + 0.5
    cy = np.arange(y0, y1, dtype=np.float64) + 0.5
    inside = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    n = len(points)
    for i in range(n):
        xa, ya = points[i]
        xb, yb = points[(i + 1) % n]
        if ya == yb:
            continue
        # rows whose centre line crosses this edge (half-open in y)
        rows = (cy >= min(ya, yb)) & (cy < max(ya, yb))
        if not rows.any():
            continue
        xcross = xa + (cy[rows] - ya) * (xb - xa) / (yb - ya)
        inside[rows] ^= cx[None, :] < xcross[:, None]
    return slice(y0, y1), slice(x0, x1), inside


def rasterize_polygons(annotations: AnnotationSet, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    for poly in annotations.polygons:
        pts = poly.as_array()
        if (pts[:, 0].min() < 0 or pts[:, 1].min() < 0
                or pts[:, 0].max() > w or pts[:, 1].max() > h):
            raise AnnotationError(f"polygon outside slide bounds {w}x{h}")
        sy, sx, cover = polygon_pixels(pts, shape)
        out[sy, sx] |= cover
    return out


def rasterize_labels(slide: Slide, annotations: AnnotationSet, tissue: TissueMask) -> LabelMask:
    if annotations.slide_id and annotations.slide_id != slide.slide_id:
        raise AnnotationError(
            f"annotations for {annotations.slide_id} applied to slide {slide.slide_id}")
    w, h = slide.meta.dimensions
    return labels_from_masks((h, w), annotations, tissue, slide.slide_id)


def labels_from_masks(shape, annotations: AnnotationSet, tissue: TissueMask, slide_id="") -> LabelMask:
    h, w = shape
    f = tissue.downsample_factor
    if tissue.mask.shape != (math.ceil(h / f), math.ceil(w / f)):
        raise ValueError("tissue mask does not match slide dimensions")
    labels = upsample_nearest(tissue.mask, f, (h, w)).astype(np.uint8)
    labels[rasterize_polygons(annotations, (h, w))] = PNI
    return LabelMask(labels, slide_id)


@dataclass(frozen=True)
class SectionSplit:
    region: Region
    needs_review: bool
    half: str  # "first", "second" or "whole"


def split_sections(slide: Slide, annotations: AnnotationSet) -> SectionSplit:
    """Keep the half of the slide (split along its longer axis) holding all annotations."""
    w, h = slide.meta.dimensions
    return split_extent(w, h, annotations)


def split_extent(w: int, h: int, annotations: AnnotationSet) -> SectionSplit:
    whole = SectionSplit(Region(0, 0, 0, w, h), True, "whole")
    if not annotations.polygons:
        return whole
    horizontal = w >= h
    axis = 0 if horizontal else 1
    mid = (w if horizontal else h) // 2
    coords = np.concatenate([p.as_array()[:, axis] for p in annotations.polygons])
    if coords.max() <= mid:
        region = Region(0, 0, 0, mid, h) if horizontal else Region(0, 0, 0, w, mid)
        return SectionSplit(region, False, "first")
    if coords.min() >= mid:
        region = Region(0, mid, 0, w - mid, h) if horizontal else Region(0, 0, mid, w, h - mid)
        return SectionSplit(region, False, "second")
    return whole
