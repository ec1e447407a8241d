"""Small MLP encoder with unit-normalized output and hand-written gradients.

The network is ``d_in -> hidden... -> d_emb`` with tanh between layers and
an L2 normalization on the output. Weights are stored ``fan_in x fan_out``
so a layer computes ``h @ W + b``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ucr.core import Rng
from ucr.errors import DataError

logger = logging.getLogger(__name__)

# Output rows with a smaller pre-normalization norm are scaled by this instead.
NORM_EPS = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class LayerStack:
    """Per-layer weight matrices and bias vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved in layer order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def check_congruent(self, other: LayerStack) -> None:
        if [a.shape for a in self.arrays()] != [a.shape for a in other.arrays()]:
            raise ValueError("parameter shapes do not match")


@dataclass
class EncoderParams(LayerStack):
    """Parameters of one encoder (online, momentum or frozen)."""

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_emb(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> EncoderParams:
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def with_flat(self, vector: np.ndarray) -> EncoderParams:
        """New parameters with this layout and values taken from ``vector``."""
        arrays, offset = [], 0
        for a in self.arrays():
            arrays.append(np.array(vector[offset : offset + a.size]).reshape(a.shape))
            offset += a.size
        return EncoderParams(weights=arrays[0::2], biases=arrays[1::2])


@dataclass
class Gradients(LayerStack):
    """dLoss/dParams, shape-congruent with the parameters they differentiate."""

    @classmethod
    def zeros_like(cls, params: LayerStack) -> Gradients:
        return cls(
            weights=[np.zeros_like(w) for w in params.weights],
            biases=[np.zeros_like(b) for b in params.biases],
        )


@dataclass
class ForwardCache:
    """Activations kept by :func:`forward` for :func:`backward`."""

    params: EncoderParams
    activations: list[np.ndarray]
    norms: np.ndarray
    embeddings: np.ndarray


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    first: Gradients
    second: Gradients
    step: int = 0

    @classmethod
    def zeros_like(cls, params: LayerStack) -> AdamState:
        return cls(first=Gradients.zeros_like(params), second=Gradients.zeros_like(params))


@dataclass
class EncoderSet:
    """Online, momentum and (after the first domain) frozen encoders.

    Attributes:
        online: Parameters trained by gradient descent
        momentum: EMA of the online parameters, the inference model
        frozen: Momentum encoder of the previous domain, or None
        optimizer: Adam state of the online parameters
    """

    online: EncoderParams
    momentum: EncoderParams
    frozen: EncoderParams | None = None
    optimizer: AdamState | None = None

    def __post_init__(self) -> None:
        self.online.check_congruent(self.momentum)
        if self.frozen is not None:
            self.online.check_congruent(self.frozen)
        if self.optimizer is None:
            self.optimizer = AdamState.zeros_like(self.online)

    @classmethod
    def create(cls, dims: list[int], rng: Rng) -> EncoderSet:
        """Fresh set whose momentum encoder starts as a copy of the online one."""
        online = init_params(dims, rng)
        return cls(online=online, momentum=online.copy())


def encoder_dims(d_in: int, hidden_dims: tuple[int, ...], d_emb: int) -> list[int]:
    return [d_in, *hidden_dims, d_emb]


def init_params(dims: list[int], rng: Rng) -> EncoderParams:
    """Glorot-uniform weights, zero biases.

    Example:
        >>> params = init_params([16, 64, 64, 32], Rng(0))
    """
    if len(dims) < 2:
        raise ValueError("an encoder needs at least one layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases)


def forward(params: EncoderParams, batch) -> tuple[np.ndarray, ForwardCache]:
    """Embed a batch of feature vectors.

    Args:
        params: Encoder parameters
        batch: (n, d_in) array-like of raw features

    Returns:
        Tuple of ((n, d_emb) unit-norm embeddings, cache for backward).

    Raises:
        DataError: If the input width does not match the first layer.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[1] != params.d_in:
        raise DataError(
            f"dimension mismatch: encoder expects {params.d_in}, got {x.shape[1]}"
        )
    activations = [x]
    h = x
    last = len(params.weights) - 1
    for index, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if index < last:
            h = np.tanh(z)
            activations.append(h)
        else:
            h = z
    norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), NORM_EPS)
    embeddings = h / norms
    return embeddings, ForwardCache(params, activations, norms, embeddings)


def backward(cache: ForwardCache, upstream: np.ndarray) -> Gradients:
    """Backpropagate dLoss/dEmbeddings to the encoder parameters.

    The normalization Jacobian is ``(I - y y^T) / ||z||`` per row.

    Raises:
        ValueError: If ``upstream`` does not match the cached embeddings.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.embeddings.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match "
            f"embeddings {cache.embeddings.shape}"
        )
    y = cache.embeddings
    dz = (upstream - y * np.sum(y * upstream, axis=1, keepdims=True)) / cache.norms

    params = cache.params
    grads = Gradients.zeros_like(params)
    for index in range(len(params.weights) - 1, -1, -1):
        a_in = cache.activations[index]
        grads.weights[index] = a_in.T @ dz
        grads.biases[index] = dz.sum(axis=0)
        if index > 0:
            dz = (dz @ params.weights[index].T) * (1.0 - a_in**2)
    return grads


def embed(params: EncoderParams, features: np.ndarray, workers: int = 1) -> np.ndarray:
    """Embed a whole domain, optionally across threads.

    Rows are independent, so chunks are reassembled in order and the result
    does not depend on ``workers``.
    """
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        return np.zeros((0, params.d_emb))
    if workers <= 1 or len(features) < 2 * workers:
        return forward(params, features)[0]
    chunks = np.array_split(features, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda chunk: forward(params, chunk)[0], chunks))
    return np.vstack(parts)


def adam_step(
    encoders: EncoderSet,
    grads: Gradients,
    lr_now: float,
    weight_decay: float,
) -> None:
    """Update the online parameters with Adam and coupled L2 weight decay."""
    encoders.online.check_congruent(grads)
    state = encoders.optimizer
    state.step += 1
    bias1 = 1.0 - ADAM_BETA1**state.step
    bias2 = 1.0 - ADAM_BETA2**state.step
    for param, grad, m, v in zip(
        encoders.online.arrays(), grads.arrays(), state.first.arrays(), state.second.arrays()
    ):
        g = grad + weight_decay * param
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        param -= lr_now * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)


def ema_update(encoders: EncoderSet, alpha: float) -> None:
    """momentum <- alpha * momentum + (1 - alpha) * online, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    for target, source in zip(encoders.momentum.arrays(), encoders.online.arrays()):
        target *= alpha
        target += (1.0 - alpha) * source


def snapshot_frozen(encoders: EncoderSet) -> None:
    """Freeze the momentum encoder and restart the online one from it."""
    encoders.frozen = encoders.momentum.copy()
    encoders.online = encoders.momentum.copy()
    encoders.optimizer = AdamState.zeros_like(encoders.online)
    logger.debug("froze momentum encoder (%d parameters)", encoders.frozen.num_params)
