"""Deterministic dense ReLU network engine with manual backpropagation.

Parameters live in one flat float32 vector (``ParamVector``) in canonical
layer order: for each layer the (out, in) weight matrix row-major, then the
bias. Every other module does its algebra on that vector, so checkpoints,
interpolation and the path-aware step agree byte for byte.
"""
import hashlib
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError

ParamVector = np.ndarray
Gradient = np.ndarray

DTYPE = np.float32
DEGENERATE_NORM = 1e-12

# Fixed stream ids; one seed feeds independent generators per consumer.
STREAMS = {
    "init": 1,
    "shuffle": 2,
    "poison": 3,
    "data": 4,
    "select": 5,
    "templates": 6,
    "ra": 7,
    "qra": 8,
    "inversion": 9,
    "blend": 10,
    "ep": 11,
    "reversed": 12,
}


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Platform-stable PCG64 generator for ``(seed, stream)``."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream],))
    return np.random.Generator(np.random.PCG64(sequence))


def derive_seed(seed: int, key: int) -> int:
    """64-bit child seed of ``seed`` for an integer ``key``."""
    state = np.random.SeedSequence(int(seed), spawn_key=(int(key),)).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


@dataclass(frozen=True)
class ArchSpec:
    """Layer widths of a dense network, input width first and class count last."""

    layer_widths: Tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise InvalidInputError("an architecture needs at least an input and an output width")
        if any(w < 1 for w in self.layer_widths):
            raise InvalidInputError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation != "relu":
            raise InvalidInputError(f"unsupported activation: {self.activation}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(out, in) shape of every weight matrix."""
        return list(zip(self.layer_widths[1:], self.layer_widths[:-1]))

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass(frozen=True)
class Model:
    """A network: its architecture and its flat parameter vector."""

    arch: ArchSpec
    params: ParamVector = field(repr=False)

    def __post_init__(self):
        params = np.ascontiguousarray(self.params)
        if params.ndim != 1 or params.shape[0] != self.arch.n_params:
            raise InvalidInputError(
                f"parameter vector has {params.size} entries, architecture needs {self.arch.n_params}"
            )
        object.__setattr__(self, "params", params)

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer into the flat vector."""
        out = []
        offset = 0
        for n_out, n_in in self.arch.layer_shapes:
            w = self.params[offset:offset + n_out * n_in].reshape(n_out, n_in)
            offset += n_out * n_in
            b = self.params[offset:offset + n_out]
            offset += n_out
            out.append((w, b))
        return out

    def with_params(self, params: ParamVector) -> "Model":
        return Model(self.arch, params)

    def astype(self, dtype) -> "Model":
        return Model(self.arch, self.params.astype(dtype))


@dataclass(frozen=True)
class SgdConfig:
    """Minibatch SGD-with-momentum schedule."""

    learning_rate: float
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidInputError("batch_size and epochs must be positive")


def init_params(arch: ArchSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, drawn from the ``init`` stream."""
    rng = rng_for(seed, "init")
    chunks = []
    for n_out, n_in in arch.layer_shapes:
        bound = math.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-bound, bound, size=n_out * n_in).astype(DTYPE))
        chunks.append(np.zeros(n_out, dtype=DTYPE))
    return np.concatenate(chunks)


def init_model(arch: ArchSpec, seed: int) -> Model:
    return Model(arch, init_params(arch, seed))


def zero_model(arch: ArchSpec) -> Model:
    return Model(arch, np.zeros(arch.n_params, dtype=DTYPE))


def _as_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != model.arch.input_dim:
        raise InvalidInputError(
            f"batch rows have width {batch.shape[-1]}, model expects {model.arch.input_dim}"
        )
    return batch.astype(model.params.dtype, copy=False)


def forward_cache(model: Model, batch: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Logits plus the per-layer inputs needed by :func:`backward`."""
    a = _as_batch(model, batch)
    acts = [a]
    layers = model.layers()
    for depth, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if depth < len(layers) - 1:
            a = np.maximum(z, 0)
            acts.append(a)
        else:
            a = z
    return a, acts


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logit rows for a batch of flattened inputs."""
    logits, _ = forward_cache(model, batch)
    return logits


def backward(
    model: Model,
    acts: Sequence[np.ndarray],
    dlogits: np.ndarray,
    want_params: bool = True,
    want_input: bool = False,
) -> Tuple[Optional[Gradient], Optional[np.ndarray]]:
    """Back-propagate ``dlogits`` to the parameters and/or the input batch."""
    layers = model.layers()
    pieces: List[np.ndarray] = []
    delta = dlogits.astype(model.params.dtype, copy=False)
    d_input = None
    for depth in range(len(layers) - 1, -1, -1):
        w, _ = layers[depth]
        a = acts[depth]
        if want_params:
            pieces.append(delta.sum(axis=0))
            pieces.append((delta.T @ a).ravel())
        if depth > 0:
            delta = (delta @ w) * (a > 0)
        elif want_input:
            d_input = delta @ w
    grad = np.concatenate(pieces[::-1]) if want_params else None
    return grad, d_input


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy (accumulated in float64) and its gradient w.r.t. logits."""
    n = logits.shape[0]
    rows = np.arange(n)
    logp = log_softmax(logits)
    loss = -float(logp[rows, labels].astype(np.float64).sum() / n)
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1
    return loss, dlogits / n


def _check_labels(labels: np.ndarray, n_rows: int, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != n_rows or n_rows == 0:
        raise InvalidInputError("labels must be a nonempty vector matching the batch")
    if labels.min() < 0 or labels.max() >= class_count:
        raise InvalidInputError(f"labels must lie in [0, {class_count})")
    return labels


def loss_and_grad(model: Model, batch: np.ndarray, labels: np.ndarray) -> Tuple[float, Gradient]:
    """Mean cross-entropy over the batch and its exact parameter gradient."""
    logits, acts = forward_cache(model, batch)
    labels = _check_labels(labels, logits.shape[0], model.arch.output_dim)
    loss, dlogits = cross_entropy(logits, labels)
    grad, _ = backward(model, acts, dlogits)
    return loss, grad


def predict(model: Model, batch: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest index."""
    return np.argmax(forward(model, batch), axis=1)


def _check_same_length(*vectors: np.ndarray) -> None:
    lengths = {v.shape[0] for v in vectors}
    if len(lengths) != 1:
        raise InvalidInputError(f"parameter vectors differ in length: {sorted(lengths)}")


def sgd_step(
    params: ParamVector, grad: Gradient, velocity: ParamVector, cfg: SgdConfig
) -> Tuple[ParamVector, ParamVector]:
    """velocity' = momentum * velocity + grad; params' = params - lr * velocity'."""
    _check_same_length(params, grad, velocity)
    new_velocity = (cfg.momentum * velocity + grad).astype(params.dtype, copy=False)
    new_params = (params - cfg.learning_rate * new_velocity).astype(params.dtype, copy=False)
    return new_params, new_velocity


def param_norm(w: ParamVector) -> float:
    return float(np.linalg.norm(w.astype(np.float64)))


def param_interpolate(w0: ParamVector, w1: ParamVector, t: float) -> ParamVector:
    """Elementwise ``w0 + t * (w1 - w0)``; endpoints, and ``w0 == w1``, are returned exactly."""
    _check_same_length(w0, w1)
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"interpolation coefficient {t} outside [0, 1]")
    if t == 0.0:
        return w0.copy()
    if t == 1.0:
        return w1.copy()
    return (w0 + t * (w1 - w0)).astype(w0.dtype, copy=False)


def param_axpy_unit(w: ParamVector, d: ParamVector, rho: float) -> ParamVector:
    """``w + rho * d / ||d||_2`` with a global norm; degenerate directions leave w as is."""
    _check_same_length(w, d)
    if rho < 0:
        raise InvalidInputError("rho must be nonnegative")
    norm = param_norm(d)
    if rho == 0 or norm < DEGENERATE_NORM:
        return w.copy()
    return (w + (rho / norm) * d).astype(w.dtype, copy=False)


def grad_check(model: Model, batch: np.ndarray, labels: np.ndarray, fd_step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients (float64)."""
    if fd_step <= 0:
        raise InvalidInputError("fd_step must be positive")
    wide = model.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    _, analytic = loss_and_grad(wide, batch, labels)
    worst = 0.0
    for i in range(wide.params.shape[0]):
        shifted = wide.params.copy()
        shifted[i] += fd_step
        plus, _ = loss_and_grad(wide.with_params(shifted), batch, labels)
        shifted[i] -= 2 * fd_step
        minus, _ = loss_and_grad(wide.with_params(shifted), batch, labels)
        numeric = (plus - minus) / (2 * fd_step)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def checksum(params: ParamVector) -> str:
    """SHA-256 of the little-endian bytes of a parameter vector."""
    return hashlib.sha256(np.asarray(params, dtype="<f4").tobytes()).hexdigest()
