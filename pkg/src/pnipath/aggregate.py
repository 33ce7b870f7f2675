"""Patch -> slide -> subject roll-up by maximum."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .scoring import ScoreTable
from .tiler import PatchRecord

AGGREGATE_CSV_FIELDS = ("level", "entity_id", "score", "argmax_child_id")


@dataclass(frozen=True)
class EntityScore:
    entity_id: str
    level: str  # "patch" | "slide" | "subject"
    score: float
    argmax_child_id: str = ""
    no_evidence: bool = False


def _max_child(children: Iterable[tuple[str, float]]) -> tuple[str, float] | None:
    # ties resolve to the smallest child id
    best = None
    for cid, s in sorted(children):
        if best is None or s > best[1]:
            best = (cid, s)
    return best


def slide_score(ensemble: ScoreTable | Mapping[str, float], slide_id: str,
                records: Sequence[PatchRecord]) -> EntityScore:
    """Maximum ensemble probability over the slide's patches.

    A slide without scored patches gets 0.0 and ``no_evidence=True``.
    """
    probs = ensemble.as_dict() if isinstance(ensemble, ScoreTable) else ensemble
    children = [(r.patch_id, probs[r.patch_id]) for r in records
                if r.slide_id == slide_id and r.patch_id in probs]
    best = _max_child(children)
    if best is None:
        return EntityScore(slide_id, "slide", 0.0, "", True)
    return EntityScore(slide_id, "slide", float(best[1]), best[0])


def slide_scores(ensemble: ScoreTable | Mapping[str, float], records: Sequence[PatchRecord],
                 slide_ids: Iterable[str]) -> dict[str, EntityScore]:
    probs = ensemble.as_dict() if isinstance(ensemble, ScoreTable) else ensemble
    by_slide: dict[str, list[tuple[str, float]]] = {}
    for r in records:
        if r.patch_id in probs:
            by_slide.setdefault(r.slide_id, []).append((r.patch_id, probs[r.patch_id]))
    out = {}
    for sid in sorted(set(slide_ids)):
        best = _max_child(by_slide.get(sid, ()))
        out[sid] = (EntityScore(sid, "slide", 0.0, "", True) if best is None
                    else EntityScore(sid, "slide", float(best[1]), best[0]))
    return out


def subject_score(slide_scores: Mapping[str, EntityScore] | Sequence[EntityScore], subject_id: str,
                  slide_subject: Mapping[str, str]) -> EntityScore:
    scores = slide_scores.values() if isinstance(slide_scores, Mapping) else slide_scores
    children = [(s.entity_id, s.score) for s in scores if slide_subject.get(s.entity_id) == subject_id]
    best = _max_child(children)
    if best is None:
        raise ValueError(f"subject {subject_id} has no slides")
    return EntityScore(subject_id, "subject", float(best[1]), best[0])


def subject_scores(slide_scores: Mapping[str, EntityScore],
                   slide_subject: Mapping[str, str]) -> dict[str, EntityScore]:
    subjects = sorted({slide_subject[s] for s in slide_scores})
    return {sub: subject_score(slide_scores, sub, slide_subject) for sub in subjects}


def write_aggregate_csv(scores: Iterable[EntityScore], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(AGGREGATE_CSV_FIELDS)
        for s in scores:
            wr.writerow([s.level, s.entity_id, repr(float(s.score)), s.argmax_child_id])


def read_aggregate_csv(path) -> list[EntityScore]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != AGGREGATE_CSV_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(AGGREGATE_CSV_FIELDS)}")
        out = []
        for row in rd:
            score = float(row["score"])
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"{path}: score {score} outside [0, 1]")
            out.append(EntityScore(row["entity_id"], row["level"], score, row["argmax_child_id"],
                                   row["level"] == "slide" and not row["argmax_child_id"]))
    return out
