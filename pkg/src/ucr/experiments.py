"""Stream runs with per-step evaluation, the rehearsal ablation grid and the K_mem sweep."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable
from dataclasses import astuple, dataclass, fields
from pathlib import Path

from ucr.config import HyperParams
from ucr.core import resolve_workers
from ucr.encoder import EncoderParams
from ucr.errors import DataError
from ucr.evaluation import (
    CurvePoint,
    EvalRecord,
    EvalSplit,
    SplitAverages,
    evaluate,
    forgetting_curve,
    split_averages,
)
from ucr.synthdata import Stream
from ucr.trainer import StreamResult, TrainState, train_stream

logger = logging.getLogger(__name__)

# (label, use_old, use_sim)
ABLATION_GRID = (
    ("baseline", False, False),
    ("+old", True, False),
    ("+sim", False, True),
    ("+old+sim", True, True),
)
DEFAULT_KMEM_VALUES = (1, 2, 4, 8)


@dataclass
class ExperimentResult:
    """A trained stream together with every per-step evaluation.

    Attributes:
        result: Output of the training loop
        records: One record per (step, split)
        seen: Names of seen splits
        unseen: Names of unseen splits
        order: Domain names in training order
    """

    result: StreamResult
    records: list[EvalRecord]
    seen: list[str]
    unseen: list[str]
    order: list[str]

    @property
    def final_step(self) -> int:
        return len(self.order) - 1

    def final_records(self) -> list[EvalRecord]:
        return [r for r in self.records if r.step == self.final_step]

    def averages(self) -> SplitAverages:
        return split_averages(self.records, self.seen, self.unseen, self.final_step)

    def first_domain_curve(self) -> list[CurvePoint]:
        """Scores of the first trained domain after every step."""
        return forgetting_curve(self.records, self.order[0])


def run_experiment(
    stream: Stream,
    hp: HyperParams,
    reverse: bool = False,
    workers: int | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
    on_domain_end: Callable[[int, TrainState], None] | None = None,
) -> ExperimentResult:
    """Train on the seen domains, evaluating every seen and unseen split after each step."""
    domains = stream.train_domains(reverse=reverse)
    if not domains:
        raise DataError("dataset has no seen domains to train on")
    workers = resolve_workers(workers)
    seen_splits = stream.seen_splits()
    unseen_splits = stream.unseen_splits()
    splits: list[EvalSplit] = seen_splits + unseen_splits

    def eval_hook(step: int, params: EncoderParams) -> list[EvalRecord]:
        records = [EvalRecord(s.name, step, evaluate(params, s, workers)) for s in splits]
        for r in records:
            logger.info(
                "step %d %s: mAP %.4f rank1 %.4f", step, r.split_name, r.report.mAP, r.report.rank(1)
            )
        return records

    result = train_stream(
        domains,
        hp,
        eval_hook=eval_hook,
        workers=workers,
        on_domain_end=on_domain_end,
        on_epoch_end=on_epoch_end,
    )
    return ExperimentResult(
        result=result,
        records=result.evaluations,
        seen=[s.name for s in seen_splits],
        unseen=[s.name for s in unseen_splits],
        order=[d.name for d in domains],
    )


@dataclass
class SummaryRow:
    label: str
    use_old: bool
    use_sim: bool
    k_mem: int
    seen_map: float
    seen_rank1: float
    unseen_map: float
    unseen_rank1: float
    first_domain_map: float

    @classmethod
    def from_experiment(cls, label: str, hp: HyperParams, experiment: ExperimentResult):
        averages = experiment.averages()
        curve = experiment.first_domain_curve()
        return cls(
            label=label,
            use_old=hp.use_old,
            use_sim=hp.use_sim,
            k_mem=hp.k_mem,
            seen_map=averages.seen_map,
            seen_rank1=averages.seen_rank1,
            unseen_map=averages.unseen_map,
            unseen_rank1=averages.unseen_rank1,
            first_domain_map=curve[-1].mAP if curve else math.nan,
        )


SUMMARY_COLUMNS = tuple(f.name for f in fields(SummaryRow))


def ablation_grid(
    stream: Stream,
    hp: HyperParams,
    reverse: bool = False,
    workers: int | None = None,
    on_run: Callable[[str], None] | None = None,
) -> list[SummaryRow]:
    """Run the four rehearsal configurations sequentially with a shared seed."""
    rows = []
    for label, use_old, use_sim in ABLATION_GRID:
        if on_run is not None:
            on_run(label)
        run_hp = hp.replace(use_old=use_old, use_sim=use_sim)
        experiment = run_experiment(stream, run_hp, reverse=reverse, workers=workers)
        rows.append(SummaryRow.from_experiment(label, run_hp, experiment))
    return rows


def kmem_sweep(
    stream: Stream,
    hp: HyperParams,
    values: tuple[int, ...] = DEFAULT_KMEM_VALUES,
    reverse: bool = False,
    workers: int | None = None,
    on_run: Callable[[str], None] | None = None,
) -> list[SummaryRow]:
    """Full rehearsal runs with a different image-memory size each."""
    rows = []
    for k_mem in values:
        label = f"k_mem={k_mem}"
        if on_run is not None:
            on_run(label)
        run_hp = hp.replace(k_mem=k_mem)
        experiment = run_experiment(stream, run_hp, reverse=reverse, workers=workers)
        rows.append(SummaryRow.from_experiment(label, run_hp, experiment))
    return rows


def write_summary_csv(rows: list[SummaryRow], path: Path | str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in astuple(row)])


def read_summary_csv(path: Path | str) -> list[SummaryRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise DataError(f"{path} is not a summary table")
        return [
            SummaryRow(
                label=r["label"],
                use_old=r["use_old"] == "True",
                use_sim=r["use_sim"] == "True",
                k_mem=int(r["k_mem"]),
                seen_map=float(r["seen_map"]),
                seen_rank1=float(r["seen_rank1"]),
                unseen_map=float(r["unseen_map"]),
                unseen_rank1=float(r["unseen_rank1"]),
                first_domain_map=float(r["first_domain_map"]),
            )
            for r in reader
        ]
