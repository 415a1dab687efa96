"""Query-based reactivation attack.

A small MLP generator learns an input perturbation, bounded by ``epsilon`` in
L-infinity, that makes the purified model mimic the retuned model's outputs,
while a cross-entropy term on the exact-purification model keeps the
perturbation from acting as a plain adversarial example.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .data_forge import ImageExample, LabeledDataset, Provenance
from .errors import InvalidInputError, TrainingDivergedError
from .nn_core import (
    DTYPE,
    ArchSpec,
    Model,
    SgdConfig,
    backward,
    cross_entropy,
    forward,
    forward_cache,
    init_model,
    log_softmax,
    predict,
    rng_for,
    zero_model,
)
from .optimizers import SGD
from .trainer import batches_per_epoch, iter_batches
from .triggers import TriggerSpec

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 16 / 255


@dataclass(frozen=True)
class QraGenerator:
    """Perturbation generator ``[d, h, h, d]`` with tanh-squashed output."""

    mlp: Model
    epsilon: float = DEFAULT_EPSILON
    alpha: float = 0.2

    def __post_init__(self):
        widths = self.mlp.arch.layer_widths
        if len(widths) < 2 or widths[0] != widths[-1]:
            raise InvalidInputError(f"generator must map R^d to R^d, got widths {widths}")
        if self.epsilon < 0:
            raise InvalidInputError("epsilon must be nonnegative")

    @property
    def input_dim(self) -> int:
        return self.mlp.arch.input_dim

    def with_params(self, params: np.ndarray) -> "QraGenerator":
        return QraGenerator(self.mlp.with_params(params), self.epsilon, self.alpha)


@dataclass(frozen=True)
class QraReport:
    """Target-label rates on perturbed clean (C-ASR) and perturbed poisoned (P-ASR) inputs."""

    c_asr: float
    p_asr: float


def generator_arch(d: int, hidden: int = 256) -> ArchSpec:
    return ArchSpec((d, hidden, hidden, d))


def init_generator(
    d: int, hidden: int = 256, epsilon: float = DEFAULT_EPSILON, alpha: float = 0.2, seed: int = 0
) -> QraGenerator:
    return QraGenerator(init_model(generator_arch(d, hidden), seed), epsilon, alpha)


def zero_generator(
    d: int, hidden: int = 256, epsilon: float = DEFAULT_EPSILON, alpha: float = 0.2
) -> QraGenerator:
    return QraGenerator(zero_model(generator_arch(d, hidden)), epsilon, alpha)


def _enforce_budget(x: np.ndarray, perturbed: np.ndarray, epsilon: float) -> np.ndarray:
    """Pull float32 rounding overshoots back inside the epsilon ball around ``x``."""
    over = np.abs(perturbed.astype(np.float64) - x.astype(np.float64)) > epsilon
    while over.any():
        perturbed[over] = np.nextafter(perturbed[over], x[over])
        over = np.abs(perturbed.astype(np.float64) - x.astype(np.float64)) > epsilon
    return perturbed


def perturb_flat(gen: QraGenerator, x: np.ndarray) -> np.ndarray:
    """x' = clamp(x + epsilon * tanh(mlp(x)), 0, 1) on flattened rows."""
    if x.shape[1] != gen.input_dim:
        raise InvalidInputError(f"inputs have width {x.shape[1]}, generator expects {gen.input_dim}")
    x = x.astype(DTYPE, copy=False)
    direction = np.tanh(forward(gen.mlp, x).astype(np.float64))
    perturbed = np.clip(x.astype(np.float64) + gen.epsilon * direction, 0.0, 1.0).astype(DTYPE)
    return _enforce_budget(x, perturbed, gen.epsilon)


def perturb(gen: QraGenerator, pixels: np.ndarray) -> np.ndarray:
    """Perturb an ``N x H x W x C`` batch."""
    flat = pixels.reshape(pixels.shape[0], -1)
    return perturb_flat(gen, flat).reshape(pixels.shape)


def qra_apply(gen: QraGenerator, x: ImageExample) -> ImageExample:
    """Perturbed copy of one image; label and provenance preserved."""
    perturbed = perturb(gen, x.pixels[None])[0]
    return ImageExample(perturbed, x.label, x.provenance, x.original_label)


def qra_objective(
    gen: QraGenerator,
    theta: np.ndarray,
    xb: np.ndarray,
    yb: np.ndarray,
    log_q: np.ndarray,
    w_p: Model,
    w_e: Model,
) -> Tuple[float, np.ndarray]:
    """Mean KL(softmax(l_ra(x)) || softmax(l_p(x'))) + alpha * CE(f_e(x'), y) and its theta gradient.

    ``log_q`` holds the retuned model's log-probabilities on the clean ``xb``;
    the three classifiers receive no gradient.
    """
    n = xb.shape[0]
    mlp = gen.mlp.with_params(theta)
    raw_out, gen_acts = forward_cache(mlp, xb)
    direction = np.tanh(raw_out)
    shifted = xb + gen.epsilon * direction
    inside = (shifted > 0.0) & (shifted < 1.0)
    perturbed = np.clip(shifted, 0.0, 1.0)

    logits_p, acts_p = forward_cache(w_p, perturbed)
    log_p = log_softmax(logits_p)
    q = np.exp(log_q)
    kl = float((q * (log_q - log_p)).astype(np.float64).sum() / n)
    _, d_perturbed = backward(w_p, acts_p, (np.exp(log_p) - q) / n,
                              want_params=False, want_input=True)
    loss = kl
    if gen.alpha > 0:
        logits_e, acts_e = forward_cache(w_e, perturbed)
        ce, d_logits_e = cross_entropy(logits_e, yb)
        _, d_e = backward(w_e, acts_e, gen.alpha * d_logits_e, want_params=False, want_input=True)
        d_perturbed = d_perturbed + d_e
        loss += gen.alpha * ce
    d_out = gen.epsilon * d_perturbed * inside * (1.0 - direction ** 2)
    grad, _ = backward(mlp, gen_acts, d_out)
    return loss, grad


def _check_models(gen: QraGenerator, *models: Model) -> None:
    archs = {m.arch for m in models}
    if len(archs) != 1:
        raise InvalidInputError("purified, retuned and surrogate models must share one architecture")
    if models[0].arch.input_dim != gen.input_dim:
        raise InvalidInputError("generator width does not match the classifier input")


@dataclass
class QraTrainResult:
    generator: QraGenerator
    loss_history: List[float] = field(default_factory=list)


def qra_train_run(
    gen: QraGenerator,
    w_p: Model,
    w_ra: Model,
    w_e: Model,
    d_c: LabeledDataset,
    epochs: int = 50,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 64,
    momentum: float = 0.0,
) -> QraTrainResult:
    _check_models(gen, w_p, w_ra, w_e)
    if d_c.input_dim != gen.input_dim:
        raise InvalidInputError("QRA dataset does not match the generator width")
    x = d_c.flat()
    log_q_all = log_softmax(forward(w_ra, x))
    cfg = SgdConfig(lr, momentum, batch_size, epochs, seed)
    optimizer = SGD(cfg)
    theta = gen.mlp.params.copy()
    per_epoch = batches_per_epoch(len(d_c), batch_size)
    batches = iter_batches(len(d_c), batch_size, seed)
    history: List[float] = []
    for epoch in range(1, epochs + 1):
        losses = []
        for _ in range(per_epoch):
            idx = next(batches)
            theta, loss = optimizer.step(
                theta,
                lambda th: qra_objective(gen, th, x[idx], d_c.labels[idx], log_q_all[idx], w_p, w_e),
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError("qra", epoch, f"loss={loss}")
            losses.append(loss)
        history.append(float(np.mean(losses)))
        logger.debug("qra epoch %d loss %.6f", epoch, history[-1])
    logger.info("trained QRA generator for %d epochs, final loss %.4f", epochs, history[-1])
    return QraTrainResult(gen.with_params(theta), history)


def qra_train(
    gen: QraGenerator,
    w_p: Model,
    w_ra: Model,
    w_e: Model,
    d_c: LabeledDataset,
    epochs: int = 50,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 64,
    momentum: float = 0.0,
) -> QraGenerator:
    """Fit the generator so perturbed queries to ``w_p`` reproduce ``w_ra``'s outputs."""
    return qra_train_run(gen, w_p, w_ra, w_e, d_c, epochs, lr, seed, batch_size, momentum).generator


def build_qra_dataset(
    train_pool: LabeledDataset,
    trig: TriggerSpec,
    y_t: int,
    n_benign: int = 500,
    n_poisoned: int = 500,
    seed: int = 0,
) -> LabeledDataset:
    """Benign samples plus triggered non-target samples, all carrying their original labels."""
    clean = np.flatnonzero(train_pool.provenance == Provenance.CLEAN)
    non_target = clean[train_pool.labels[clean] != y_t]
    if non_target.size < n_poisoned or clean.size < n_benign + n_poisoned:
        raise InvalidInputError("training pool too small for the requested QRA mix")
    rng = rng_for(seed, "qra")
    poison_idx = np.sort(rng.choice(non_target, size=n_poisoned, replace=False))
    benign_idx = np.sort(rng.choice(np.setdiff1d(clean, poison_idx), size=n_benign, replace=False))
    source = train_pool.subset(poison_idx)
    poisoned = LabeledDataset(
        pixels=trig.apply(source.pixels, "train"),
        labels=source.original_labels.copy(),
        original_labels=source.original_labels.copy(),
        provenance=np.full(n_poisoned, Provenance.POISONED, dtype=np.uint8),
        class_count=train_pool.class_count,
    )
    merged = LabeledDataset.concat([train_pool.subset(benign_idx), poisoned])
    return merged.subset(rng.permutation(len(merged)))


def _target_rate(model: Model, gen: QraGenerator, pixels: np.ndarray, y_t: int) -> float:
    perturbed = perturb_flat(gen, pixels.reshape(pixels.shape[0], -1))
    return float(np.mean(predict(model, perturbed) == y_t))


def qra_evaluate(
    gen: QraGenerator,
    model: Model,
    clean_test: LabeledDataset,
    backdoor_test: LabeledDataset,
    y_t: int,
) -> QraReport:
    """C-ASR on perturbed non-target clean images, P-ASR on perturbed triggered images."""
    clean_idx = np.flatnonzero(clean_test.original_labels != y_t)
    if clean_idx.size == 0 or len(backdoor_test) == 0:
        raise InvalidInputError("QRA evaluation needs non-target clean and triggered examples")
    return QraReport(
        c_asr=_target_rate(model, gen, clean_test.pixels[clean_idx], y_t),
        p_asr=_target_rate(model, gen, backdoor_test.pixels, y_t),
    )


def qra_transfer(
    gen: QraGenerator,
    other_purified: Model,
    clean_test: LabeledDataset,
    backdoor_test: LabeledDataset,
    y_t: int,
    reference: Optional[Model] = None,
) -> QraReport:
    """Evaluate a trained generator against a purified model it was not trained on."""
    if reference is not None and reference.arch != other_purified.arch:
        raise InvalidInputError("transfer target architecture differs from the training target")
    if other_purified.arch.input_dim != gen.input_dim:
        raise InvalidInputError("transfer target input width differs from the generator")
    return qra_evaluate(gen, other_purified, clean_test, backdoor_test, y_t)
