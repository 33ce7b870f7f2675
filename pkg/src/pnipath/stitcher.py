"""Slide heatmaps from overlapping per-pixel patch predictions.

Predictions from every patch and every ensemble member are accumulated as
(sum, count) buffers; partial buffers from independent workers merge by
addition.  Patch grids are float32 and sums float64, so sums of up to
millions of contributions are exact for grids of equal value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from PIL import Image

from .common import round_half_away

DEFAULT_THRESHOLD = 75

# overlay colours: annotated and predicted, predicted only, annotated only
INTERSECTION_RGB = (0, 0, 255)
PREDICTION_ONLY_RGB = (255, 255, 0)
TRUTH_ONLY_RGB = (255, 0, 0)


class StitchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PixelPredictionPatch:
    patch_id: str
    x: int
    y: int
    probabilities: np.ndarray
    model_id: str = ""

    def __post_init__(self):
        grid = np.asarray(self.probabilities, dtype=np.float32)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise StitchError(f"{self.patch_id}: prediction grid must be square")
        if grid.size and (np.isnan(grid).any() or grid.min() < 0 or grid.max() > 1):
            raise StitchError(f"{self.patch_id}: probabilities must lie in [0, 1]")
        object.__setattr__(self, "probabilities", grid)


class HeatmapAccumulator:
    def __init__(self, width: int, height: int):
        self.width, self.height = int(width), int(height)
        self.sum = np.zeros((self.height, self.width), dtype=np.float64)
        self.count = np.zeros((self.height, self.width), dtype=np.int32)
        self._patch_px = None

    def add(self, patch: PixelPredictionPatch) -> None:
        grid = patch.probabilities
        side = grid.shape[0]
        if self._patch_px is None:
            self._patch_px = side
        elif side != self._patch_px:
            raise StitchError("all prediction patches must share one size")
        x, y = patch.x, patch.y
        if x < 0 or y < 0 or x + side > self.width or y + side > self.height:
            raise StitchError(f"{patch.patch_id}: placement ({x}, {y}) outside "
                              f"{self.width}x{self.height} slide")
        self.sum[y:y + side, x:x + side] += grid
        self.count[y:y + side, x:x + side] += 1

    def merge(self, other: "HeatmapAccumulator") -> "HeatmapAccumulator":
        if (other.width, other.height) != (self.width, self.height):
            raise StitchError("cannot merge heatmaps of different size")
        if None not in (self._patch_px, other._patch_px) and self._patch_px != other._patch_px:
            raise StitchError("cannot merge heatmaps built from different patch sizes")
        self.sum += other.sum
        self.count += other.count
        self._patch_px = self._patch_px or other._patch_px
        return self

    def heatmap(self) -> "Heatmap":
        prob = np.zeros_like(self.sum)
        covered = self.count > 0
        prob[covered] = self.sum[covered] / self.count[covered]
        np.clip(prob, 0.0, 1.0, out=prob)
        return Heatmap(prob, self.count.copy())


@dataclass(frozen=True, eq=False)
class Heatmap:
    probabilities: np.ndarray  # float64, (h, w)
    counts: np.ndarray  # contributions per pixel

    @property
    def width(self) -> int:
        return self.probabilities.shape[1]

    @property
    def height(self) -> int:
        return self.probabilities.shape[0]

    def quantized(self) -> np.ndarray:
        return quantize(self)


def stitch(patches: Iterable[PixelPredictionPatch], slide_dims: tuple[int, int]) -> Heatmap:
    """Average all contributions per pixel; uncovered pixels are 0."""
    acc = HeatmapAccumulator(*slide_dims)
    for p in patches:
        acc.add(p)
    return acc.heatmap()


def quantize(heatmap) -> np.ndarray:
    """Probabilities to 8-bit values, round(p * 255) with halves away from zero."""
    p = heatmap.probabilities if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if p.size and (np.isnan(p).any() or p.min() < 0.0 or p.max() > 1.0):
        raise StitchError("heatmap probabilities must lie in [0, 1]")
    return np.clip(round_half_away(p * 255.0), 0, 255).astype(np.uint8)


def binarize(quantized: np.ndarray, threshold: int = DEFAULT_THRESHOLD, inclusive: bool = True) -> np.ndarray:
    q = np.asarray(quantized)
    return q >= threshold if inclusive else q > threshold


def save_gray(arr: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8)).save(path)


def save_binary(mask: np.ndarray, path) -> None:
    save_gray(mask.astype(np.uint8) * 255, path)


def load_binary(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def overlay(pred: np.ndarray, truth: np.ndarray, background: np.ndarray | None = None) -> np.ndarray:
    """RGB comparison image: intersection blue, prediction-only yellow, missed truth red."""
    if pred.shape != truth.shape:
        raise StitchError("prediction and truth masks differ in size")
    if background is None:
        out = np.full(pred.shape + (3,), 255, dtype=np.uint8)
    else:
        bg = np.asarray(background, dtype=np.uint8)
        out = np.repeat(bg[..., None], 3, axis=2) if bg.ndim == 2 else bg.copy()
    out[pred & truth] = INTERSECTION_RGB
    out[pred & ~truth] = PREDICTION_ONLY_RGB
    out[~pred & truth] = TRUTH_ONLY_RGB
    return out
