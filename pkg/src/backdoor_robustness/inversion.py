"""Universal trigger inversion producing the reversed dataset D_r.

A mask/pattern pair is optimized so that blending it into clean images drives
the backdoored model to the target class while an L1 penalty keeps the mask
small. Mask and pattern are sigmoid-squashed, so they always lie in [0, 1].
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data_forge import LabeledDataset, Provenance, fraction_count
from .errors import InvalidInputError, TrainingDivergedError
from .nn_core import DTYPE, Model, SgdConfig, backward, cross_entropy, forward_cache, predict, rng_for
from .optimizers import SGD
from .trainer import iter_batches

logger = logging.getLogger(__name__)

MASK_INIT = -3.0


@dataclass(frozen=True)
class InversionConfig:
    target: int
    lambda_mask: float = 1e-2
    steps: int = 300
    lr: float = 0.1
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.lambda_mask < 0:
            raise InvalidInputError("lambda_mask must be nonnegative")
        if self.steps < 1:
            raise InvalidInputError("steps must be positive")


@dataclass(frozen=True)
class ReversedTrigger:
    """H x W x C mask and pattern, both in [0, 1]."""

    mask: np.ndarray = field(repr=False)
    pattern: np.ndarray = field(repr=False)

    @property
    def mask_l1(self) -> float:
        return float(np.abs(self.mask).sum())

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        """x_r = (1 - m) * x + m * p."""
        return ((1.0 - self.mask) * pixels + self.mask * self.pattern).astype(DTYPE, copy=False)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _split(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = theta.shape[0] // 2
    return _sigmoid(theta[:d]), _sigmoid(theta[d:])


def inversion_loss(
    model: Model, xb: np.ndarray, target: int, theta: np.ndarray, lambda_mask: float
) -> Tuple[float, np.ndarray]:
    """Target-class CE of the blended batch plus lambda * ||m||_1, with its theta gradient."""
    m, p = _split(theta)
    blended = (1.0 - m) * xb + m * p
    logits, acts = forward_cache(model, blended)
    ce, dlogits = cross_entropy(logits, np.full(xb.shape[0], target))
    _, d_blend = backward(model, acts, dlogits, want_params=False, want_input=True)
    d_mask = (d_blend * (p - xb)).sum(axis=0) + lambda_mask
    d_pattern = (d_blend * m).sum(axis=0)
    grad = np.concatenate([d_mask * m * (1.0 - m), d_pattern * p * (1.0 - p)]).astype(DTYPE)
    return ce + lambda_mask * float(m.astype(np.float64).sum()), grad


def invert_trigger(backdoored: Model, d_t: LabeledDataset, cfg: InversionConfig) -> ReversedTrigger:
    """Optimize a universal mask/pattern toward ``cfg.target`` on clean tuning data."""
    if d_t.count(Provenance.POISONED):
        raise InvalidInputError("trigger inversion needs a clean tuning set")
    d = d_t.input_dim
    theta = np.concatenate([np.full(d, MASK_INIT, dtype=DTYPE), np.zeros(d, dtype=DTYPE)])
    sgd_cfg = SgdConfig(cfg.lr, cfg.momentum, cfg.batch_size, 1, cfg.seed)
    optimizer = SGD(sgd_cfg)
    x = d_t.flat()
    batches = iter_batches(len(d_t), cfg.batch_size, cfg.seed)
    for step in range(cfg.steps):
        xb = x[next(batches)]
        theta, loss = optimizer.step(
            theta, lambda th: inversion_loss(backdoored, xb, cfg.target, th, cfg.lambda_mask)
        )
        if not np.isfinite(loss):
            raise TrainingDivergedError("inversion", step + 1, f"loss={loss}")
    m, p = _split(theta)
    return ReversedTrigger(m.reshape(d_t.dims), p.reshape(d_t.dims))


def reversed_asr(model: Model, d_t: LabeledDataset, trig: ReversedTrigger, target: int) -> float:
    """Target hit rate of the reversed trigger on non-target examples."""
    keep = np.flatnonzero(d_t.labels != target)
    if keep.size == 0:
        raise InvalidInputError("no non-target examples to measure the reversed trigger on")
    blended = trig.apply(d_t.pixels[keep]).reshape(keep.size, -1)
    return float(np.mean(predict(model, blended) == target))


@dataclass
class InversionResult:
    trigger: ReversedTrigger
    lambda_mask: float
    asr: float
    tried: List[Tuple[float, float, float]] = field(default_factory=list)


def search_trigger(
    backdoored: Model,
    d_t: LabeledDataset,
    base: InversionConfig,
    lambdas: Sequence[float] = (1e-3, 1e-2, 1e-1),
    asr_floor: float = 0.8,
) -> InversionResult:
    """Smallest-mask trigger over a lambda grid reaching ``asr_floor``; else the strongest one."""
    best: Optional[InversionResult] = None
    strongest: Optional[InversionResult] = None
    tried = []
    for lam in lambdas:
        cfg = InversionConfig(base.target, lam, base.steps, base.lr, base.batch_size,
                              base.seed, base.momentum)
        trig = invert_trigger(backdoored, d_t, cfg)
        asr = reversed_asr(backdoored, d_t, trig, base.target)
        tried.append((lam, asr, trig.mask_l1))
        logger.info("inversion lambda %.0e: ASR %.3f, mask L1 %.2f", lam, asr, trig.mask_l1)
        candidate = InversionResult(trig, lam, asr)
        if asr >= asr_floor and (best is None or trig.mask_l1 < best.trigger.mask_l1):
            best = candidate
        if strongest is None or asr > strongest.asr:
            strongest = candidate
    chosen = best or strongest
    if best is None:
        logger.warning("no inverted trigger reached ASR %.2f; keeping lambda %.0e (ASR %.3f)",
                       asr_floor, chosen.lambda_mask, chosen.asr)
    chosen.tried = tried
    return chosen


def make_reversed_dataset(
    d_t: LabeledDataset, trig: ReversedTrigger, frac: float = 0.10, seed: int = 0
) -> LabeledDataset:
    """D_r merged with the remaining clean examples; reversed samples keep their labels."""
    if not 0.0 < frac <= 1.0:
        raise InvalidInputError(f"reversed fraction {frac} outside (0, 1]")
    n = fraction_count(frac, len(d_t))
    chosen = np.sort(rng_for(seed, "reversed").choice(len(d_t), size=n, replace=False))
    pixels = d_t.pixels.copy()
    pixels[chosen] = trig.apply(pixels[chosen])
    provenance = d_t.provenance.copy()
    provenance[chosen] = Provenance.REVERSED
    return LabeledDataset(pixels, d_t.labels.copy(), d_t.original_labels.copy(), provenance,
                          d_t.class_count)
