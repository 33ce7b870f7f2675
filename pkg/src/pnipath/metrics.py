"""ROC/AUC, operating-point diagnostics, IoU and percentile bootstrap intervals."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .common import derive_rng

DEFAULT_OPERATING_POINTS = (0.99, 0.95, 0.90, 0.85)
INDEX_THRESHOLD = 0.95


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledScore:
    entity_id: str
    score: float
    truth: bool


def _arrays(scores, truth=None) -> tuple[np.ndarray, np.ndarray]:
    if truth is None:
        rows = list(scores)
        s = np.array([r.score for r in rows], dtype=np.float64)
        t = np.array([bool(r.truth) for r in rows], dtype=bool)
    else:
        s = np.asarray(scores, dtype=np.float64)
        t = np.asarray(truth).astype(bool)
    if s.shape != t.shape or s.ndim != 1:
        raise MetricsError("scores and truth must be 1-D and equally long")
    return s, t


def _require_both_classes(t: np.ndarray) -> tuple[int, int]:
    n_pos = int(t.sum())
    n_neg = int(t.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("need at least one positive and one negative case")
    return n_pos, n_neg


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # descending; the first point (0, 0) has threshold +inf
    auc: float
    n_pos: int
    n_neg: int

    def points(self) -> list[dict]:
        return [{"threshold": None if math.isinf(th) else float(th), "fpr": float(f), "tpr": float(t)}
                for th, f, t in zip(self.thresholds, self.fpr, self.tpr)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("threshold", "fpr", "tpr"))
            for th, f, t in zip(self.thresholds, self.fpr, self.tpr):
                wr.writerow(("inf" if math.isinf(th) else repr(float(th)), repr(float(f)), repr(float(t))))


def _cumulative_counts(s: np.ndarray, t: np.ndarray):
    order = np.argsort(-s, kind="mergesort")
    s_sorted, t_sorted = s[order], t[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    tp = np.cumsum(t_sorted, dtype=np.int64)[ends]
    fp = (ends + 1) - tp
    return s_sorted[ends], tp, fp


def roc_auc(scores, truth=None) -> RocCurve:
    """ROC over distinct score thresholds; AUC by the trapezoid rule.

    Computed in integer counts, so the trapezoid area is the pair statistic
    P(pos > neg) + P(tie) / 2 up to a single final division.
    """
    s, t = _arrays(scores, truth)
    n_pos, n_neg = _require_both_classes(t)
    th, tp, fp = _cumulative_counts(s, t)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(fp / n_neg, tp / n_pos, np.r_[np.inf, th], auc, n_pos, n_neg)


def auc_statistic(cases: np.ndarray) -> float:
    """AUC of an (n, 2) array of [score, truth] rows; NaN when a class is missing."""
    t = cases[:, 1] > 0.5
    n_pos = int(t.sum())
    if n_pos == 0 or n_pos == t.size:
        return math.nan
    return roc_auc(cases[:, 0], t).auc


def _rate(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class OperatingPointRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    sensitivity: float | None = field(init=False)
    specificity: float | None = field(init=False)
    ppv: float | None = field(init=False)
    npv: float | None = field(init=False)
    accuracy: float | None = field(init=False)

    def __post_init__(self):
        tp, fp, fn, tn = self.tp, self.fp, self.fn, self.tn
        object.__setattr__(self, "sensitivity", _rate(tp, tp + fn))
        object.__setattr__(self, "specificity", _rate(tn, tn + fp))
        object.__setattr__(self, "ppv", _rate(tp, tp + fp))
        object.__setattr__(self, "npv", _rate(tn, tn + fn))
        object.__setattr__(self, "accuracy", _rate(tp + tn, tp + fp + fn + tn))

    def to_json(self) -> dict:
        return asdict(self)


def operating_point(scores, threshold: float, truth=None, inclusive: bool = True) -> OperatingPointRow:
    """Confusion counts and rates with positive call ``score >= threshold`` (or ``>``)."""
    s, t = _arrays(scores, truth)
    _require_both_classes(t)
    called = s >= threshold if inclusive else s > threshold
    tp = int(np.sum(called & t))
    fp = int(np.sum(called & ~t))
    fn = int(np.sum(~called & t))
    tn = int(np.sum(~called & ~t))
    return OperatingPointRow(float(threshold), tp, fp, fn, tn)


def core_iou(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """All positive pixels of a core pooled as one object."""
    pred = np.asarray(pred_mask, dtype=bool)
    truth = np.asarray(truth_mask, dtype=bool)
    if pred.shape != truth.shape:
        raise MetricsError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = int(np.count_nonzero(pred | truth))
    if not truth.any():
        raise MetricsError("truth mask has no positive pixels")
    return int(np.count_nonzero(pred & truth)) / union


def mean_iou(per_core: Sequence[float]) -> float:
    vals = [float(v) for v in per_core]
    if not vals:
        raise MetricsError("no PNI-positive cores to average")
    return math.fsum(vals) / len(vals)


@dataclass(frozen=True)
class BootstrapResult:
    lo: float
    hi: float
    replicates: np.ndarray
    attempts: int
    redrawn: int


def bootstrap(statistic_fn: Callable, cases, n: int = 1000, seed: int = 0, confidence: float = 0.95,
              strata: Sequence | None = None) -> BootstrapResult:
    """Percentile bootstrap over cases.

    Replicate ``i`` draws from its own stream (seed, i), so results do not
    depend on scheduling.  Resamples on which ``statistic_fn`` is undefined
    (NaN or None) are redrawn, up to 10 * n attempts overall.  With
    ``strata`` the resampling is done within each stratum.
    """
    arr = cases if isinstance(cases, np.ndarray) else None
    m = len(cases)
    if m < 2:
        raise MetricsError("bootstrap needs at least two cases")
    if n < 1:
        raise MetricsError("bootstrap needs n >= 1")
    groups = None
    if strata is not None:
        keys = np.asarray(strata)
        if keys.shape[0] != m:
            raise MetricsError("strata must label every case")
        groups = [np.flatnonzero(keys == k) for k in np.unique(keys)]

    def take(idx):
        return arr[idx] if arr is not None else [cases[i] for i in idx]

    reps = np.empty(n, dtype=np.float64)
    attempts = redrawn = 0
    max_attempts = 10 * n
    for i in range(n):
        rng = derive_rng(seed, "bootstrap", i)
        while True:
            attempts += 1
            if attempts > max_attempts:
                raise MetricsError(
                    f"statistic undefined on {redrawn} of {attempts - 1} resamples; data too degenerate")
            if groups is None:
                idx = rng.integers(0, m, size=m)
            else:
                idx = np.concatenate([g[rng.integers(0, g.size, size=g.size)] for g in groups])
            value = statistic_fn(take(idx))
            if value is not None and not (isinstance(value, float) and math.isnan(value)):
                reps[i] = float(value)
                break
            redrawn += 1
    if redrawn > 0.9 * attempts:
        raise MetricsError("statistic undefined on more than 90% of resamples")
    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.percentile(reps, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapResult(float(lo), float(hi), reps, attempts, redrawn)


def bootstrap_ci(statistic_fn: Callable, cases, n: int = 1000, seed: int = 0,
                 confidence: float = 0.95, strata: Sequence | None = None) -> tuple[float, float]:
    res = bootstrap(statistic_fn, cases, n=n, seed=seed, confidence=confidence, strata=strata)
    return res.lo, res.hi


def labeled_cases(labeled: Sequence[LabeledScore]) -> np.ndarray:
    return np.array([[r.score, 1.0 if r.truth else 0.0] for r in labeled], dtype=np.float64)


def _ci_around(point: float, lo: float, hi: float) -> tuple[float, float]:
    # percentile limits can miss the point estimate on skewed statistics
    return min(lo, point), max(hi, point)


def classification_metrics(labeled: Sequence[LabeledScore], thresholds=DEFAULT_OPERATING_POINTS,
                           n_boot: int = 1000, seed: int = 0, inclusive: bool = True,
                           stratified: bool = False) -> dict:
    cases = labeled_cases(labeled)
    roc = roc_auc(labeled)
    res = bootstrap(auc_statistic, cases, n=n_boot, seed=seed,
                    strata=cases[:, 1] if stratified else None)
    lo, hi = _ci_around(roc.auc, res.lo, res.hi)
    rows = [operating_point(labeled, th, inclusive=inclusive).to_json()
            for th in sorted(thresholds, reverse=True)]
    return {
        "n_positive": roc.n_pos,
        "n_negative": roc.n_neg,
        "auc": roc.auc,
        "auc_ci": [lo, hi],
        "bootstrap_redrawn": res.redrawn,
        "operating_points": rows,
        "roc": roc.points(),
    }


def segmentation_metrics(per_core: dict[str, float], n_boot: int = 1000, seed: int = 0) -> dict:
    ids = sorted(per_core)
    vals = np.array([per_core[i] for i in ids], dtype=np.float64)
    mean = mean_iou(vals)
    if len(vals) >= 2:
        lo, hi = _ci_around(mean, *bootstrap_ci(mean_iou, vals, n=n_boot, seed=seed))
    else:
        lo = hi = None
    return {
        "n_cores": len(ids),
        "per_core_iou": {i: per_core[i] for i in ids},
        "mean_iou": mean,
        "mean_iou_ci": [lo, hi],
    }
