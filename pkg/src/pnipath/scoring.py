"""Patch score tables, the Gaussian oracle scorer and ensemble soft voting.

External models plug in through the score CSV (``patch_id,model_id,probability``);
the oracle stands in for them in tests and synthetic runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .common import derive_rng
from .preprocess import LabelMask
from .tiler import PatchRecord

SCORE_CSV_FIELDS = ("patch_id", "model_id", "probability")
ENSEMBLE_MODEL_ID = "ensemble"


class ScoreError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Rows of (patch_id, model_id, probability), kept sorted by (model_id, patch_id)."""

    patch_ids: tuple[str, ...]
    model_ids: tuple[str, ...]
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if not (len(self.patch_ids) == len(self.model_ids) == p.size):
            raise ScoreError("score table columns differ in length")
        if p.size and (np.isnan(p).any() or p.min() < 0.0 or p.max() > 1.0):
            raise ScoreError("probabilities must lie in [0, 1]")
        keys = list(zip(self.model_ids, self.patch_ids))
        if len(set(keys)) != len(keys):
            raise ScoreError("duplicate (patch_id, model_id) rows")
        order = sorted(range(len(keys)), key=keys.__getitem__)
        object.__setattr__(self, "patch_ids", tuple(self.patch_ids[i] for i in order))
        object.__setattr__(self, "model_ids", tuple(self.model_ids[i] for i in order))
        p = p[order] if p.size else p
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    @classmethod
    def single_model(cls, model_id: str, probs: Mapping[str, float]) -> "ScoreTable":
        ids = tuple(probs)
        return cls(ids, (model_id,) * len(ids), np.array([probs[i] for i in ids], dtype=np.float64))

    def __len__(self) -> int:
        return len(self.patch_ids)

    def __eq__(self, other):
        if not isinstance(other, ScoreTable):
            return NotImplemented
        return (self.patch_ids == other.patch_ids and self.model_ids == other.model_ids
                and np.array_equal(self.probabilities, other.probabilities))

    @property
    def models(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.model_ids)))

    def for_model(self, model_id: str) -> dict[str, float]:
        return {pid: float(p) for pid, m, p in zip(self.patch_ids, self.model_ids, self.probabilities)
                if m == model_id}

    def split_models(self) -> list["ScoreTable"]:
        return [ScoreTable.single_model(m, self.for_model(m)) for m in self.models]

    def as_dict(self) -> dict[str, float]:
        """patch_id -> probability; only valid for single-model tables."""
        if len(self.models) > 1:
            raise ScoreError("table holds several models; soft-vote first")
        return dict(zip(self.patch_ids, map(float, self.probabilities)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(SCORE_CSV_FIELDS)
            for pid, m, p in zip(self.patch_ids, self.model_ids, self.probabilities):
                wr.writerow([pid, m, repr(float(p))])


def concat(tables: Iterable[ScoreTable]) -> ScoreTable:
    tables = list(tables)
    return ScoreTable(
        tuple(p for t in tables for p in t.patch_ids),
        tuple(m for t in tables for m in t.model_ids),
        np.concatenate([t.probabilities for t in tables]) if tables else np.zeros(0))


def ingest_external(csv_path, known_patches: Iterable[str] | None = None) -> ScoreTable:
    """Read and validate a score CSV produced by an external model.

    ``known_patches``, when given, must contain every referenced patch_id.
    """
    path = Path(csv_path)
    pids, mids, probs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(h.strip() for h in header) != SCORE_CSV_FIELDS:
            raise ScoreError(f"{path}: header must be {','.join(SCORE_CSV_FIELDS)}")
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ScoreError(f"{path}:{lineno}: expected 3 fields")
            try:
                p = float(row[2])
            except ValueError as exc:
                raise ScoreError(f"{path}:{lineno}: bad probability {row[2]!r}") from exc
            if not 0.0 <= p <= 1.0:
                raise ScoreError(f"{path}:{lineno}: probability {p} outside [0, 1]")
            pids.append(row[0])
            mids.append(row[1])
            probs.append(p)
    if known_patches is not None:
        unknown = set(pids) - set(known_patches)
        if unknown:
            raise ScoreError(f"{path}: {len(unknown)} unknown patch ids, e.g. {sorted(unknown)[0]}")
    try:
        return ScoreTable(tuple(pids), tuple(mids), np.array(probs, dtype=np.float64))
    except ScoreError as exc:
        raise ScoreError(f"{path}: {exc}") from exc


def soft_vote(tables: Sequence[ScoreTable], model_id: str = ENSEMBLE_MODEL_ID) -> ScoreTable:
    """Per-patch arithmetic mean over models.

    Accepts one table per model or a single multi-model table.
    """
    per_model = [t for tab in tables for t in tab.split_models()]
    if not per_model:
        raise ScoreError("nothing to ensemble")
    names = [t.model_ids[0] for t in per_model if len(t)]
    if len(set(names)) != len(names):
        raise ScoreError("model ids repeat across tables")
    # rows within a single-model table are sorted by patch id
    ref = per_model[0].patch_ids
    for t in per_model[1:]:
        if t.patch_ids != ref:
            raise ScoreError("tables cover different patch sets")
    # sorted per patch so the result does not depend on model order; offsets from
    # the minimum keep equal inputs exact and the mean inside [min, max]
    stack = np.sort(np.vstack([t.probabilities for t in per_model]), axis=0)
    lo, hi = stack[0], stack[-1]
    mean = np.clip(lo + (stack - lo).sum(axis=0) / len(per_model), lo, hi)
    return ScoreTable(ref, (model_id,) * len(ref), mean)


@dataclass(frozen=True)
class OracleScorerConfig:
    mu_pos: float = 0.9
    mu_neg: float = 0.1
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mu_neg <= self.mu_pos <= 1.0:
            raise ValueError("need 0 <= mu_neg <= mu_pos <= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def _truth_labels(records: Sequence[PatchRecord], label_masks, patch_px) -> np.ndarray:
    if label_masks is None:
        return np.array([r.positive for r in records], dtype=bool)
    out = np.empty(len(records), dtype=bool)
    for i, r in enumerate(records):
        try:
            lm: LabelMask = label_masks[r.slide_id]
        except KeyError:
            raise ScoreError(f"no label mask for patch {r.patch_id}") from None
        out[i] = bool(lm.pni[r.y:r.y + patch_px, r.x:r.x + patch_px].any())
    return out


def oracle_score(records: Sequence[PatchRecord], config: OracleScorerConfig,
                 model_id: str = "oracle", label_masks: Mapping[str, LabelMask] | None = None,
                 patch_px: int | None = None) -> ScoreTable:
    """One model's scores: clamp(mu_label + N(0, sigma), 0, 1).

    Truth comes from each record's label, or is re-read from level-0
    ``label_masks`` (keyed by slide id, windows of ``patch_px``) when given.
    Noise is drawn over patches in patch-id order from a stream named by
    (seed, model_id), so the table does not depend on record order.
    """
    records = sorted(records, key=lambda r: r.patch_id)
    if label_masks is not None and patch_px is None:
        raise ValueError("patch_px is needed to look patches up in label masks")
    truth = _truth_labels(records, label_masks, patch_px)
    mu = np.where(truth, config.mu_pos, config.mu_neg)
    if config.sigma > 0:
        rng = derive_rng(config.seed, "oracle-score", model_id)
        mu = mu + rng.normal(0.0, config.sigma, size=mu.size)
    probs = np.clip(mu, 0.0, 1.0)
    return ScoreTable(tuple(r.patch_id for r in records), (model_id,) * len(records), probs)


def oracle_pixel_probabilities(truth: np.ndarray, config: OracleScorerConfig, model_id: str,
                               patch_id: str, invert: bool = False) -> np.ndarray:
    """Per-pixel oracle output for one patch given its boolean PNI truth window."""
    t = ~truth if invert else truth
    p = np.where(t, config.mu_pos, config.mu_neg).astype(np.float32)
    if config.sigma > 0:
        rng = derive_rng(config.seed, "oracle-pixels", model_id, patch_id)
        p = p + rng.normal(0.0, config.sigma, size=p.shape).astype(np.float32)
    return np.clip(p, 0.0, 1.0)


def model_ids(n: int) -> list[str]:
    return [f"model_{k:02d}" for k in range(n)]
