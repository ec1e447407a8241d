"""Lifelong training loop.

Each domain runs ``epochs_per_domain`` epochs. An epoch re-clusters the
domain with the momentum encoder and refreshes the current prototypes; each
iteration then optimizes the current-domain loss and, from the second
domain on, the rehearsal loss and the similarity constraint on a batch drawn
from the image memory. At the end of a domain its prototypes and K_mem
samples per cluster are committed and the momentum encoder is frozen as the
reference for the next domain.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Callable
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np

from ucr.config import BaselineVariant, HyperParams
from ucr.core import Domain, Rng, resolve_workers, validate_stream
from ucr.encoder import (
    EncoderParams,
    EncoderSet,
    adam_step,
    backward,
    ema_update,
    embed,
    encoder_dims,
    forward,
    snapshot_frozen,
)
from ucr.errors import (
    DataError,
    DegeneratePrototypeError,
    EmptyClusteringError,
    TrainingError,
)
from ucr.losses import (
    loss_current,
    loss_old,
    loss_overall,
    loss_sim,
    sim_distributions,
)
from ucr.memory import (
    IdentityPool,
    ImageMemory,
    PrototypeBank,
    camera_prototypes,
    cluster_prototypes,
    commit_domain_memory,
    refresh_prototype_memory,
    sample_batch,
)
from ucr.pseudo_label import PseudoLabeling, pseudo_labels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up to ``base_lr`` over ``warmup_epochs``, constant afterwards."""

    base_lr: float
    warmup_epochs: int

    def __call__(self, epoch: int) -> float:
        if self.warmup_epochs <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, (epoch + 1) / self.warmup_epochs)


@dataclass
class MetricsRow:
    domain_index: int
    epoch: int
    iter: int
    loss_current: float
    loss_old: float
    loss_sim: float
    loss_overall: float
    lr: float
    num_clusters: int


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow))


@dataclass
class MetricsLog:
    """Per-iteration training metrics.

    Skipped epochs are recorded as a single row with ``iter = -1``, NaN
    losses and ``num_clusters = 0``.
    """

    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def record_skip(self, domain_index: int, epoch: int, lr: float) -> None:
        nan = float("nan")
        self.rows.append(MetricsRow(domain_index, epoch, -1, nan, nan, nan, nan, lr, 0))

    @property
    def skipped_epochs(self) -> int:
        return sum(1 for row in self.rows if row.iter < 0)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in self.rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in astuple(row)])
        return buffer.getvalue()

    def write_csv(self, path: Path | str) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path: Path | str) -> MetricsLog:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
                raise DataError(f"{path} is not a metrics log")
            rows = [
                MetricsRow(
                    **{
                        f.name: (int if f.type in ("int", int) else float)(record[f.name])
                        for f in fields(MetricsRow)
                    }
                )
                for record in reader
            ]
        return cls(rows)


@dataclass
class TrainState:
    """Everything the training loop mutates.

    Attributes:
        encoders: Online, momentum and frozen encoders
        bank: Prototype memory
        memory: Image memory
        rng: Sampling randomness (identity sampler, random memory policy)
        domain_index: Number of domains finished so far
        epoch: Current epoch within the domain
        iteration: Current iteration within the epoch
        metrics: Training metrics log
        committed_clusters: Clusters committed per finished domain
    """

    encoders: EncoderSet
    bank: PrototypeBank
    memory: ImageMemory
    rng: Rng
    domain_index: int = 0
    epoch: int = 0
    iteration: int = 0
    metrics: MetricsLog = field(default_factory=MetricsLog)
    committed_clusters: list[int] = field(default_factory=list)

    @classmethod
    def initial(cls, d_in: int, hp: HyperParams) -> TrainState:
        root = Rng(hp.seed)
        dims = encoder_dims(d_in, hp.hidden_dims, hp.d_emb)
        return cls(
            encoders=EncoderSet.create(dims, root.fork(0)),
            bank=PrototypeBank(hp.d_emb),
            memory=ImageMemory(),
            rng=root.fork(1),
        )


@dataclass
class _Rehearsal:
    """Per-domain view of the image memory used for rehearsal batches."""

    pool: IdentityPool
    features: np.ndarray
    frozen: np.ndarray | None
    momentum: np.ndarray | None = None


def _rehearsal_for(state: TrainState, hp: HyperParams, workers: int) -> _Rehearsal | None:
    if state.domain_index < 1 or len(state.memory) == 0:
        return None
    if not (hp.use_old or hp.use_sim):
        return None
    features = state.memory.features
    frozen = None
    if hp.use_sim:
        if state.encoders.frozen is None:
            raise TrainingError("similarity constraint needs a frozen encoder")
        # the frozen encoder does not change within a domain
        frozen = embed(state.encoders.frozen, features, workers)
    return _Rehearsal(IdentityPool.from_memory(state.memory), features, frozen)


def _train_step(
    state: TrainState,
    hp: HyperParams,
    features: np.ndarray,
    current_pool: IdentityPool,
    rehearsal: _Rehearsal | None,
    lr: float,
    num_clusters: int,
) -> MetricsRow:
    encoders = state.encoders
    current_batch = sample_batch(current_pool, hp.batch_current, state.rng)
    x_current = features[current_batch.indices]
    blocks = [x_current]
    old_batch = None
    if rehearsal is not None:
        old_batch = sample_batch(rehearsal.pool, hp.batch_old, state.rng)
        blocks.append(rehearsal.features[old_batch.indices])

    embeddings, cache = forward(encoders.online, np.vstack(blocks))
    n_current = len(current_batch)
    momentum_current = None
    if hp.variant is BaselineVariant.CLUSTER_HARD:
        momentum_current = forward(encoders.momentum, x_current)[0]
    current = loss_current(
        embeddings[:n_current],
        current_batch.pseudo_ids,
        state.bank.current,
        hp,
        camera_protos=state.bank.camera_current,
        momentum_embeddings=momentum_current,
    )

    old = sim = None
    if old_batch is not None:
        online_old = embeddings[n_current:]
        if hp.use_old:
            old = loss_old(
                online_old, old_batch.pseudo_ids, state.bank.all_prototypes(), hp.tau_p
            )
        if hp.use_sim:
            if hp.reembed_old_each_iter:
                momentum_old = forward(encoders.momentum, blocks[1])[0]
            else:
                momentum_old = rehearsal.momentum[old_batch.indices]
            sim = loss_sim(
                sim_distributions(
                    online_old,
                    momentum_old,
                    rehearsal.frozen[old_batch.indices],
                    hp.tau_s,
                )
            )
    overall = loss_overall(current, old, sim, hp.lambda_sim)

    adam_step(encoders, backward(cache, overall.grad), lr, hp.weight_decay)
    ema_update(encoders, hp.alpha)
    return MetricsRow(
        domain_index=state.domain_index,
        epoch=state.epoch,
        iter=state.iteration,
        loss_current=current.value,
        loss_old=old.value if old is not None else 0.0,
        loss_sim=sim.value if sim is not None else 0.0,
        loss_overall=overall.value,
        lr=lr,
        num_clusters=num_clusters,
    )


def _refresh_prototypes(
    state: TrainState, hp: HyperParams, embeddings: np.ndarray, labeling: PseudoLabeling, cameras
) -> None:
    prototypes = cluster_prototypes(embeddings, labeling, hp.normalize_prototypes)
    camera = None
    if hp.variant is BaselineVariant.CLUSTER_CAM:
        camera = camera_prototypes(embeddings, labeling, cameras, hp.normalize_prototypes)
    refresh_prototype_memory(state.bank, prototypes, camera)


def train_domain(
    state: TrainState,
    domain: Domain,
    hp: HyperParams,
    workers: int = 1,
    on_epoch_end: Callable[[TrainState], None] | None = None,
) -> None:
    """Train on one domain, then commit its memory and freeze the encoder.

    Raises:
        TrainingError: If no epoch of the domain produced a usable clustering.
    """
    features = domain.features
    cameras = domain.camera_ids
    schedule = LrSchedule(hp.lr, hp.warmup_epochs)
    rehearsal = _rehearsal_for(state, hp, workers)
    last_labeling: PseudoLabeling | None = None

    for epoch in range(hp.epochs_per_domain):
        state.epoch = epoch
        lr = schedule(epoch)
        momentum_embeddings = embed(state.encoders.momentum, features, workers)
        labeling = pseudo_labels(momentum_embeddings, hp)
        try:
            _refresh_prototypes(state, hp, momentum_embeddings, labeling, cameras)
        except (EmptyClusteringError, DegeneratePrototypeError) as e:
            logger.warning(
                "domain %d (%s) epoch %d skipped: %s", state.domain_index, domain.name, epoch, e
            )
            state.metrics.record_skip(state.domain_index, epoch, lr)
            if on_epoch_end is not None:
                on_epoch_end(state)
            continue
        last_labeling = labeling

        if rehearsal is not None and hp.use_sim and not hp.reembed_old_each_iter:
            rehearsal.momentum = embed(state.encoders.momentum, rehearsal.features, workers)
        pool = IdentityPool.from_labels(labeling)
        rows = []
        for iteration in range(hp.iters_per_epoch):
            state.iteration = iteration
            row = _train_step(
                state, hp, features, pool, rehearsal, lr, labeling.num_clusters
            )
            state.metrics.append(row)
            rows.append(row)
        logger.info(
            "domain %d (%s) epoch %d: %d clusters, %d outliers, lr %.2e, "
            "loss %.4f (current %.4f, old %.4f, sim %.4f)",
            state.domain_index,
            domain.name,
            epoch,
            labeling.num_clusters,
            labeling.num_outliers,
            lr,
            np.mean([r.loss_overall for r in rows]),
            np.mean([r.loss_current for r in rows]),
            np.mean([r.loss_old for r in rows]),
            np.mean([r.loss_sim for r in rows]),
        )
        if on_epoch_end is not None:
            on_epoch_end(state)

    if last_labeling is None:
        raise TrainingError(
            f"domain {domain.name!r} aborted: no epoch produced any cluster "
            f"(eps={hp.dbscan_eps}, min_pts={hp.dbscan_min_pts})"
        )

    final_embeddings = embed(state.encoders.momentum, features, workers)
    try:
        _refresh_prototypes(state, hp, final_embeddings, last_labeling, cameras)
    except DegeneratePrototypeError as e:
        raise TrainingError(f"domain {domain.name!r}: cannot commit memory: {e}") from e
    commit_domain_memory(
        state.bank,
        state.memory,
        final_embeddings,
        last_labeling,
        domain.samples,
        hp.k_mem,
        hp.policy,
        rng=state.rng,
        domain_id=domain.domain_id,
    )
    snapshot_frozen(state.encoders)
    state.committed_clusters.append(last_labeling.num_clusters)
    state.domain_index += 1


EvalHook = Callable[[int, EncoderParams], list]


@dataclass
class StreamResult:
    """Outcome of a full lifelong run.

    Attributes:
        momentum: Final momentum encoder, the model kept for inference
        metrics: Training metrics log
        evaluations: Records returned by the eval hook after each domain
        state: Final training state (memory, bank, encoders)
    """

    momentum: EncoderParams
    metrics: MetricsLog
    evaluations: list
    state: TrainState


def train_stream(
    domains: list[Domain],
    hp: HyperParams,
    eval_hook: EvalHook | None = None,
    workers: int | None = None,
    on_domain_end: Callable[[int, TrainState], None] | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
) -> StreamResult:
    """Train sequentially on ``domains`` and return the final momentum encoder.

    Args:
        domains: Unlabeled training domains in stream order
        hp: Hyperparameters
        eval_hook: Called with (step, momentum encoder) after every domain;
            whatever it returns is collected into ``evaluations``
        workers: Thread count for whole-domain embedding (capped by UCR_THREADS)
        on_domain_end: Called with (step, state) after every domain
        on_epoch_end: Called with the state after every epoch

    Raises:
        DataError: If ``domains`` is empty or fails validation.
    """
    if not domains:
        raise DataError("empty domain list: nothing to train on")
    d_in = domains[0].features.shape[1]
    validate_stream(domains, d_in)
    workers = resolve_workers(workers)

    state = TrainState.initial(d_in, hp)
    evaluations: list = []
    for step, domain in enumerate(domains):
        logger.info("step %d: training on %s (%d samples)", step, domain.name, len(domain))
        train_domain(state, domain, hp, workers=workers, on_epoch_end=on_epoch_end)
        if eval_hook is not None:
            evaluations.extend(eval_hook(step, state.encoders.momentum.copy()))
        if on_domain_end is not None:
            on_domain_end(step, state)
    if any(math.isnan(r.loss_overall) for r in state.metrics.rows if r.iter >= 0):
        logger.warning("non-finite training loss recorded")
    return StreamResult(state.encoders.momentum.copy(), state.metrics, evaluations, state)
