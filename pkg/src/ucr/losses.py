"""Training objectives with analytic gradients w.r.t. online embeddings.

Every loss is a mean over anchors and returns a :class:`LossValue` whose
gradient has the shape of the online embeddings that entered it. Momentum
and frozen embeddings are constants: no gradient flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ucr.config import BaselineVariant, HyperParams
from ucr.errors import LossInputError
from ucr.memory import CameraPrototypes


@dataclass
class LossValue:
    """A scalar loss and its gradient w.r.t. the online embeddings.

    Attributes:
        value: Mean loss over anchors
        grad: (batch, d_emb) gradient
        parts: Named component values, filled by composite losses
    """

    value: float
    grad: np.ndarray
    parts: dict[str, float] = field(default_factory=dict)

    @classmethod
    def zero(cls, batch: int, d_emb: int) -> LossValue:
        return cls(0.0, np.zeros((batch, d_emb)))

    def scaled(self, weight: float) -> LossValue:
        return LossValue(float(weight * self.value), weight * self.grad)

    def __add__(self, other: LossValue) -> LossValue:
        return LossValue(self.value + other.value, self.grad + other.grad)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max-logit subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _prototype_contrast(
    embeddings: np.ndarray, targets: np.ndarray, prototypes: np.ndarray, tau: float
) -> LossValue:
    """Mean of -log softmax(emb . p_target / tau) over all prototypes."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= len(prototypes)):
        raise LossInputError(
            f"prototype targets must lie in [0, {len(prototypes)}), got {targets.tolist()}"
        )
    n = len(embeddings)
    logp = log_softmax(embeddings @ prototypes.T / tau)
    rows = np.arange(n)
    value = float(-logp[rows, targets].mean())
    coeff = np.exp(logp)
    coeff[rows, targets] -= 1.0
    grad = coeff @ prototypes / (tau * n)
    return LossValue(value, grad)


def loss_cluster(
    embeddings: np.ndarray, labels: np.ndarray, prototypes: np.ndarray, tau_p: float
) -> LossValue:
    """Cluster prototype contrastive loss over the current-domain prototypes."""
    return _prototype_contrast(embeddings, labels, prototypes, tau_p)


def loss_old(
    embeddings: np.ndarray,
    prototype_indices: np.ndarray,
    all_prototypes: np.ndarray,
    tau_p: float,
) -> LossValue:
    """Old-domain contrastive rehearsal: each stored sample against all of P."""
    return _prototype_contrast(embeddings, prototype_indices, all_prototypes, tau_p)


def hardest_negatives(similarities: np.ndarray, negatives: np.ndarray, n_neg: int):
    """Indices of the ``n_neg`` negatives most similar to the anchor.

    Ties go to the lower index.
    """
    order = np.argsort(-similarities[negatives], kind="stable")
    return negatives[order[:n_neg]]


def loss_cam(
    embeddings: np.ndarray,
    labels: np.ndarray,
    camera_protos: CameraPrototypes,
    n_neg: int,
    tau_c: float,
) -> LossValue:
    """Camera prototype contrastive loss.

    For each anchor of cluster ``a`` and each camera prototype ``p_aj`` of
    that cluster, the softmax runs over ``{p_aj}`` plus the ``n_neg`` camera
    prototypes of other clusters most similar to the anchor; the terms are
    averaged over the cluster's cameras and then over anchors.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(embeddings)
    vectors = camera_protos.vectors
    grad = np.zeros_like(embeddings)
    total = 0.0
    for i in range(n):
        positives = np.flatnonzero(camera_protos.cluster_ids == labels[i])
        if len(positives) == 0:
            raise LossInputError(f"cluster {labels[i]} has no camera prototype")
        sims = vectors @ embeddings[i]
        negatives = hardest_negatives(
            sims, np.flatnonzero(camera_protos.cluster_ids != labels[i]), n_neg
        )
        anchor_grad = np.zeros(embeddings.shape[1])
        anchor_loss = 0.0
        for j in positives:
            candidates = np.concatenate(([j], negatives))
            logp = log_softmax(sims[candidates] / tau_c)
            anchor_loss -= logp[0]
            coeff = np.exp(logp)
            coeff[0] -= 1.0
            anchor_grad += coeff @ vectors[candidates] / tau_c
        total += anchor_loss / len(positives)
        grad[i] = anchor_grad / (len(positives) * n)
    return LossValue(float(total / n), grad)


def loss_hard(
    embeddings: np.ndarray, momentum_embeddings: np.ndarray, labels: np.ndarray
) -> LossValue:
    """Hard instance contrastive loss on plain cosine similarities.

    The positive of anchor ``i`` is the momentum embedding of the
    same-label batch member (other than ``i``) least similar to it; the
    denominator adds every different-label momentum embedding. Anchors with
    no positive in the batch are left out of the mean.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    momentum_embeddings = np.asarray(momentum_embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    sims = embeddings @ momentum_embeddings.T
    grad = np.zeros_like(embeddings)
    losses = []
    anchors = []
    for i in range(len(embeddings)):
        same = labels == labels[i]
        same[i] = False
        positives = np.flatnonzero(same)
        if len(positives) == 0:
            continue
        hard = positives[np.argmin(sims[i, positives])]
        candidates = np.concatenate(([hard], np.flatnonzero(labels != labels[i])))
        logp = log_softmax(sims[i, candidates])
        losses.append(-logp[0])
        coeff = np.exp(logp)
        coeff[0] -= 1.0
        grad[i] = coeff @ momentum_embeddings[candidates]
        anchors.append(i)
    if not anchors:
        return LossValue(0.0, grad)
    return LossValue(float(np.mean(losses)), grad / len(anchors))


def loss_current(
    embeddings: np.ndarray,
    labels: np.ndarray,
    prototypes: np.ndarray,
    hp: HyperParams,
    camera_protos: CameraPrototypes | None = None,
    momentum_embeddings: np.ndarray | None = None,
    variant: BaselineVariant | str | None = None,
) -> LossValue:
    """Current-domain objective for the chosen baseline variant.

    ``cluster_only`` is the cluster loss alone, ``cluster+hard`` adds the hard
    instance loss and ``cluster+cam`` adds ``lambda_cam`` times the camera loss.
    """
    variant = BaselineVariant(variant or hp.baseline_variant)
    cluster = loss_cluster(embeddings, labels, prototypes, hp.tau_p)
    parts = {"cluster": cluster.value}
    total = cluster
    if variant is BaselineVariant.CLUSTER_HARD:
        if momentum_embeddings is None:
            raise LossInputError("cluster+hard needs momentum embeddings of the batch")
        hard = loss_hard(embeddings, momentum_embeddings, labels)
        parts["hard"] = hard.value
        total = total + hard
    elif variant is BaselineVariant.CLUSTER_CAM:
        if camera_protos is None:
            raise LossInputError("cluster+cam needs camera prototypes")
        cam = loss_cam(embeddings, labels, camera_protos, hp.n_neg, hp.tau_c)
        parts["cam"] = cam.value
        total = total + cam.scaled(hp.lambda_cam)
    return LossValue(total.value, total.grad, parts)


@dataclass
class SimDistributions:
    """Row-stochastic image-to-image similarity distributions.

    Attributes:
        p: Online-vs-momentum similarity distribution
        q: Frozen-vs-frozen reference distribution
        log_p: Log of ``p`` (computed stably)
        log_q: Log of ``q``
        online: Online embeddings ``p`` was computed from, if any
        momentum: Momentum embeddings ``p`` was computed from, if any
        tau_s: Temperature used for ``p``
    """

    p: np.ndarray
    q: np.ndarray
    log_p: np.ndarray
    log_q: np.ndarray
    online: np.ndarray | None = None
    momentum: np.ndarray | None = None
    tau_s: float = 1.0

    @classmethod
    def from_matrices(cls, p: np.ndarray, q: np.ndarray) -> SimDistributions:
        """Distributions given directly; no gradient can be formed from them."""
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        return cls(p, q, np.log(p), np.log(q))


def sim_distributions(
    online: np.ndarray,
    momentum: np.ndarray,
    frozen: np.ndarray,
    tau_s: float,
) -> SimDistributions:
    """Similarity distributions of a rehearsal batch.

    ``P[i] = softmax_j(online[i] . momentum[j] / tau_s)`` and
    ``Q[i] = softmax_j(frozen[i] . frozen[j] / tau_s)``; the self pair
    ``j = i`` is included in both.

    Args:
        online: Online embeddings of the batch
        momentum: Momentum embeddings of the same samples
        frozen: Frozen-expert embeddings of the same samples
        tau_s: Similarity temperature
    """
    online = np.asarray(online, dtype=np.float64)
    if len(online) < 2:
        raise LossInputError("similarity distributions need a batch of at least 2")
    log_p = log_softmax(online @ momentum.T / tau_s)
    log_q = log_softmax(frozen @ frozen.T / tau_s)
    return SimDistributions(
        np.exp(log_p), np.exp(log_q), log_p, log_q, online, np.asarray(momentum), tau_s
    )


def loss_sim(dists: SimDistributions) -> LossValue:
    """Mean over anchors of KL(P[i] || Q[i]); gradient flows only through P."""
    n = len(dists.p)
    row_kl = np.sum(dists.p * (dists.log_p - dists.log_q), axis=1)
    value = float(row_kl.mean())
    if dists.online is None or dists.momentum is None:
        return LossValue(value, np.zeros((n, 0)))
    dlogits = dists.p * (dists.log_p - dists.log_q - row_kl[:, None])
    grad = dlogits @ dists.momentum / (dists.tau_s * n)
    return LossValue(value, grad)


def loss_overall(
    current: LossValue,
    old: LossValue | None = None,
    sim: LossValue | None = None,
    lambda_sim: float = 0.0,
) -> LossValue:
    """``L_current + L_old + λ_sim·L_sim``.

    The gradient stacks the current-batch rows first and the rehearsal-batch
    rows (old and similarity gradients summed) after them, matching a single
    forward pass over the concatenated batch. During the first domain only
    ``current`` is given.
    """
    parts = {f"current_{k}": v for k, v in current.parts.items()}
    parts["current"] = current.value
    if old is None and sim is None:
        return LossValue(current.value, current.grad, parts)

    reference = old if old is not None else sim
    rehearsal = LossValue.zero(*reference.grad.shape)
    if old is not None:
        rehearsal = rehearsal + old
        parts["old"] = old.value
    if sim is not None:
        rehearsal = rehearsal + sim.scaled(lambda_sim)
        parts["sim"] = sim.value
    value = current.value + rehearsal.value
    return LossValue(value, np.vstack([current.grad, rehearsal.grad]), parts)
