"""Open slide-directory format: ``meta.json`` plus one lossless PNG per pyramid level.

A slide directory looks like::

    S0001/
      meta.json      {slide_id, subject_id, mpp_x, mpp_y, scanner_tag,
                      levels: [{width, height, downsample}, ...]}
      level_0.png    full resolution (20X), 8-bit RGB
      level_1.png    ...

Slide handles are immutable; level pixels are decoded lazily and cached.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .common import round_half_away

META_FILE = "meta.json"
META_KEYS = ("slide_id", "subject_id", "mpp_x", "mpp_y", "scanner_tag", "levels")

# 20X pixel sizes of the two scanners used for the original cohort.
MPP_HAMAMATSU = 0.45202
MPP_APERIO = 0.5032


class SlideError(ValueError):
    """Invalid slide directory, metadata or region."""


@dataclass(frozen=True)
class Level:
    width: int
    height: int
    downsample: float


@dataclass(frozen=True)
class SlideMeta:
    slide_id: str
    subject_id: str
    levels: tuple[Level, ...]
    mpp_x: float
    mpp_y: float
    scanner_tag: str = ""

    def __post_init__(self):
        validate_meta(self)

    @property
    def dimensions(self) -> tuple[int, int]:
        return self.levels[0].width, self.levels[0].height

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "subject_id": self.subject_id,
            "mpp_x": self.mpp_x,
            "mpp_y": self.mpp_y,
            "scanner_tag": self.scanner_tag,
            "levels": [
                {"width": lv.width, "height": lv.height, "downsample": lv.downsample}
                for lv in self.levels
            ],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SlideMeta":
        missing = [k for k in META_KEYS if k not in payload]
        if missing:
            raise SlideError(f"meta.json missing keys: {missing}")
        try:
            levels = tuple(
                Level(int(lv["width"]), int(lv["height"]), float(lv["downsample"]))
                for lv in payload["levels"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SlideError(f"malformed level list: {exc}") from exc
        return cls(
            slide_id=str(payload["slide_id"]),
            subject_id=str(payload["subject_id"]),
            levels=levels,
            mpp_x=float(payload["mpp_x"]),
            mpp_y=float(payload["mpp_y"]),
            scanner_tag=str(payload["scanner_tag"]),
        )


def validate_meta(meta: SlideMeta) -> None:
    if not meta.levels:
        raise SlideError("slide has no levels")
    if meta.mpp_x <= 0 or meta.mpp_y <= 0:
        raise SlideError("microns per pixel must be positive")
    base = meta.levels[0]
    if base.downsample != 1:
        raise SlideError("level 0 must have downsample 1")
    if base.width <= 0 or base.height <= 0:
        raise SlideError("level 0 has empty dimensions")
    prev = 0.0
    for k, lv in enumerate(meta.levels):
        if lv.downsample <= prev:
            raise SlideError(f"downsample factors must strictly increase (level {k})")
        prev = lv.downsample
        for dim, size in (("width", base.width), ("height", base.height)):
            expected = size / lv.downsample
            if abs(getattr(lv, dim) - expected) > 1:
                raise SlideError(
                    f"level {k} {dim} {getattr(lv, dim)} inconsistent with "
                    f"downsample {lv.downsample} of {size}"
                )


@dataclass(frozen=True)
class Region:
    level: int
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit image; ``pixels`` has shape (h, w) for gray or (h, w, 3) for RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8:
            raise SlideError("raster images are 8-bit")
        if px.ndim == 2 or (px.ndim == 3 and px.shape[2] == 3):
            return
        raise SlideError(f"unsupported image shape {px.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class Slide:
    path: Path
    meta: SlideMeta
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def slide_id(self) -> str:
        return self.meta.slide_id

    def level_array(self, level: int) -> np.ndarray:
        """Decoded pixels of a whole level (read-only view, shared between callers)."""
        if not 0 <= level < len(self.meta.levels):
            raise SlideError(f"slide {self.slide_id} has no level {level}")
        with self._lock:
            arr = self._cache.get(level)
            if arr is None:
                arr = _load_level(self.path, level, self.meta.levels[level])
                arr.setflags(write=False)
                self._cache[level] = arr
        return arr


def _load_level(path: Path, k: int, level: Level) -> np.ndarray:
    fname = path / f"level_{k}.png"
    if not fname.exists():
        raise SlideError(f"missing level image {fname}")
    try:
        with Image.open(fname) as im:
            im.load()
            if im.mode not in ("RGB", "L"):
                raise SlideError(f"{fname}: unsupported mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise SlideError(f"corrupt level image {fname}: {exc}") from exc
    if arr.shape[1] != level.width or arr.shape[0] != level.height:
        raise SlideError(
            f"{fname}: size {arr.shape[1]}x{arr.shape[0]} does not match "
            f"metadata {level.width}x{level.height}"
        )
    return arr


def slide_from_array(level0: np.ndarray, slide_id: str, subject_id: str = "", mpp: float = MPP_APERIO,
                     downsamples=(1,)) -> Slide:
    """Slide held in memory (no directory); lower levels built by block mean."""
    level0 = np.ascontiguousarray(level0, dtype=np.uint8)
    cache, levels = {}, []
    for k, ds in enumerate(downsamples):
        img = level0.copy() if ds == 1 else downsample(level0, ds).pixels
        img.setflags(write=False)
        cache[k] = img
        levels.append(Level(img.shape[1], img.shape[0], float(ds)))
    meta = SlideMeta(slide_id, subject_id or slide_id, tuple(levels), mpp, mpp, "memory")
    return Slide(path=Path("<memory>"), meta=meta, _cache=cache)


def open_slide(path) -> Slide:
    path = Path(path)
    meta_path = path / META_FILE
    if not meta_path.is_file():
        raise SlideError(f"missing metadata file {meta_path}")
    try:
        payload = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SlideError(f"unreadable metadata {meta_path}: {exc}") from exc
    meta = SlideMeta.from_json(payload)
    for k in range(len(meta.levels)):
        if not (path / f"level_{k}.png").is_file():
            raise SlideError(f"missing level image level_{k}.png in {path}")
    return Slide(path=path, meta=meta)


def read_region(slide: Slide, region: Region) -> RasterImage:
    if not 0 <= region.level < len(slide.meta.levels):
        raise SlideError(f"no level {region.level}")
    lv = slide.meta.levels[region.level]
    if region.x < 0 or region.y < 0 or region.w <= 0 or region.h <= 0:
        raise SlideError(f"invalid region {region}")
    if region.x + region.w > lv.width or region.y + region.h > lv.height:
        raise SlideError(f"region {region} exceeds level {region.level} bounds {lv.width}x{lv.height}")
    arr = slide.level_array(region.level)
    return RasterImage(arr[region.y:region.y + region.h, region.x:region.x + region.w].copy())


def downsample(image, factor: int) -> RasterImage:
    """Block-mean downsampling; partial edge blocks average the pixels present."""
    if int(factor) != factor or factor < 1:
        raise SlideError(f"downsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    px = image.pixels if isinstance(image, RasterImage) else np.asarray(image, dtype=np.uint8)
    if factor == 1:
        return RasterImage(px.copy())
    h, w = px.shape[:2]
    oh, ow = math.ceil(h / factor), math.ceil(w / factor)
    pad = ((0, oh * factor - h), (0, ow * factor - w)) + ((0, 0),) * (px.ndim - 2)
    padded = np.pad(px.astype(np.float64), pad)
    shape = (oh, factor, ow, factor) + px.shape[2:]
    sums = padded.reshape(shape).sum(axis=(1, 3))
    rows = np.minimum(factor, h - np.arange(oh) * factor)
    cols = np.minimum(factor, w - np.arange(ow) * factor)
    counts = np.outer(rows, cols).astype(np.float64)
    if px.ndim == 3:
        counts = counts[:, :, None]
    out = np.clip(round_half_away(sums / counts), 0, 255).astype(np.uint8)
    return RasterImage(out)


def write_slide(path, level0: np.ndarray, slide_id: str, subject_id: str,
                mpp: float = MPP_APERIO, scanner_tag: str = "synthetic",
                downsamples=(1, 16), mpp_y: float | None = None) -> Slide:
    """Write a slide directory, building lower levels by block-mean downsampling."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    level0 = np.ascontiguousarray(level0, dtype=np.uint8)
    h, w = level0.shape[:2]
    levels = []
    for k, ds in enumerate(downsamples):
        img = level0 if ds == 1 else downsample(level0, ds).pixels
        Image.fromarray(img).save(path / f"level_{k}.png", compress_level=1)
        levels.append(Level(img.shape[1], img.shape[0], float(ds)))
    meta = SlideMeta(slide_id=slide_id, subject_id=subject_id, levels=tuple(levels),
                     mpp_x=mpp, mpp_y=mpp if mpp_y is None else mpp_y,
                     scanner_tag=scanner_tag)
    (path / META_FILE).write_text(json.dumps(meta.to_json(), indent=2) + "\n", encoding="utf-8")
    return Slide(path=path, meta=meta)
