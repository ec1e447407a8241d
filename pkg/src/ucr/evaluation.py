"""Retrieval evaluation: mAP and CMC with same-identity same-camera filtering."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import average_precision_score

from ucr.core import Sample
from ucr.encoder import EncoderParams, embed
from ucr.errors import DataError, EvaluationError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("split_name", "step", "mAP", "rank1", "rank5", "rank10", "skipped")
FORGETTING_COLUMNS = ("step", "mAP", "rank1")


@dataclass
class EvalSplit:
    """Query and gallery samples of one domain; every sample carries a gt_id."""

    name: str
    query: list[Sample]
    gallery: list[Sample]

    def __post_init__(self) -> None:
        for role, samples in (("query", self.query), ("gallery", self.gallery)):
            for index, sample in enumerate(samples):
                if sample.gt_id is None:
                    raise DataError(f"split {self.name!r}: {role} sample {index} has no gt_id")


@dataclass
class EvalReport:
    """Retrieval scores of one split.

    Attributes:
        mAP: Mean average precision over scored queries
        cmc: Rank-k accuracy for k = 1..len(cmc)
        skipped: Queries with no gallery positive after filtering
    """

    mAP: float
    cmc: np.ndarray
    skipped: int = 0

    def rank(self, k: int) -> float:
        """CMC at rank ``k``; ranks past the gallery size saturate."""
        if k < 1:
            raise ValueError("rank must be >= 1")
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def rank_gallery(query_emb: np.ndarray, gallery_embs: np.ndarray) -> np.ndarray:
    """Gallery indices by descending cosine similarity; ties keep gallery order."""
    if len(gallery_embs) == 0:
        raise EvaluationError("cannot rank an empty gallery")
    return np.argsort(-(gallery_embs @ query_emb), kind="stable")


def average_precision(relevant: np.ndarray) -> float:
    """AP of a ranked relevance mask: mean of precision@k over relevant ranks.

    Raises:
        EvaluationError: If nothing in the mask is relevant.
    """
    relevant = np.asarray(relevant, dtype=bool)
    if not relevant.any():
        raise EvaluationError("average precision is undefined without a relevant item")
    # strictly decreasing scores reproduce the given order exactly
    scores = -np.arange(len(relevant), dtype=np.float64)
    return float(average_precision_score(relevant.astype(np.int64), scores))


def evaluate_embeddings(
    query_emb: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_emb: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
) -> EvalReport:
    """Score precomputed embeddings.

    For each query, gallery entries sharing both its identity and its camera
    are dropped before ranking. Queries left without a positive are skipped.

    Raises:
        EvaluationError: If every query is skipped.
    """
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    n_gallery = len(gallery_ids)
    hits = np.zeros(n_gallery)
    aps = []
    skipped = 0
    for emb, qid, qcam in zip(query_emb, query_ids, query_cams):
        keep = np.flatnonzero(~((gallery_ids == qid) & (gallery_cams == qcam)))
        if len(keep) == 0:
            skipped += 1
            continue
        order = keep[rank_gallery(emb, gallery_emb[keep])]
        relevant = gallery_ids[order] == qid
        if not relevant.any():
            skipped += 1
            continue
        aps.append(average_precision(relevant))
        hits[int(np.argmax(relevant)) :] += 1
    if not aps:
        raise EvaluationError(f"all {skipped} queries were skipped")
    return EvalReport(float(np.mean(aps)), hits / len(aps), skipped)


def evaluate(params: EncoderParams, split: EvalSplit, workers: int = 1) -> EvalReport:
    """Embed a split with ``params`` and score it."""
    if not split.query or not split.gallery:
        raise EvaluationError(f"split {split.name!r} needs both query and gallery samples")

    def _arrays(samples: list[Sample]):
        features = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
        ids = np.array([s.gt_id for s in samples], dtype=np.int64)
        cams = np.array([s.camera_id for s in samples], dtype=np.int64)
        return embed(params, features, workers), ids, cams

    report = evaluate_embeddings(*_arrays(split.query), *_arrays(split.gallery))
    if report.skipped:
        logger.warning("split %s: %d queries skipped", split.name, report.skipped)
    return report


@dataclass
class EvalRecord:
    """One report of a split after a given stream step."""

    split_name: str
    step: int
    report: EvalReport

    def row(self) -> list:
        r = self.report
        return [
            self.split_name,
            self.step,
            repr(float(r.mAP)),
            repr(r.rank(1)),
            repr(r.rank(5)),
            repr(r.rank(10)),
            r.skipped,
        ]


@dataclass
class CurvePoint:
    step: int
    mAP: float
    rank1: float


def forgetting_curve(records: list[EvalRecord], split_name: str | None = None) -> list[CurvePoint]:
    """Scores of one split across stream steps, ordered by step.

    Args:
        records: Per-step records, possibly of several splits
        split_name: Split to follow; defaults to the split of the first record
    """
    if not records:
        return []
    split_name = split_name or records[0].split_name
    picked = sorted((r for r in records if r.split_name == split_name), key=lambda r: r.step)
    return [CurvePoint(r.step, r.report.mAP, r.report.rank(1)) for r in picked]


@dataclass
class SplitAverages:
    """Mean mAP and Rank-1 over seen and unseen splits at one step."""

    seen_map: float = float("nan")
    seen_rank1: float = float("nan")
    unseen_map: float = float("nan")
    unseen_rank1: float = float("nan")
    counts: dict[str, int] = field(default_factory=dict)


def split_averages(
    records: list[EvalRecord], seen: list[str], unseen: list[str], step: int
) -> SplitAverages:
    at_step = {r.split_name: r.report for r in records if r.step == step}
    averages = SplitAverages()
    for group, names in (("seen", seen), ("unseen", unseen)):
        reports = [at_step[n] for n in names if n in at_step]
        averages.counts[group] = len(reports)
        if reports:
            setattr(averages, f"{group}_map", float(np.mean([r.mAP for r in reports])))
            setattr(averages, f"{group}_rank1", float(np.mean([r.rank(1) for r in reports])))
    return averages


def write_report_csv(records: list[EvalRecord], path: Path | str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(r.row() for r in records)


def read_report_csv(path: Path | str) -> list[dict]:
    """Rows of a report CSV with numeric columns converted."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise DataError(f"{path} is not an evaluation report")
        return [
            {
                "split_name": row["split_name"],
                "step": int(row["step"]),
                "mAP": float(row["mAP"]),
                "rank1": float(row["rank1"]),
                "rank5": float(row["rank5"]),
                "rank10": float(row["rank10"]),
                "skipped": int(row["skipped"]),
            }
            for row in reader
        ]


def write_forgetting_csv(curve: list[CurvePoint], path: Path | str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FORGETTING_COLUMNS)
        writer.writerows([p.step, repr(float(p.mAP)), repr(float(p.rank1))] for p in curve)
