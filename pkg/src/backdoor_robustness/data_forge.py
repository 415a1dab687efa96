"""Synthetic image datasets, trigger application and training-set poisoning.

Datasets keep whole-array storage (pixels ``N x H x W x C`` in [0, 1]) with
per-example labels, pre-poison labels and a provenance flag, so every split
of the lab (training set, clean tuning set, reversed set, QRA mix, test sets)
is one ``LabeledDataset``.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .nn_core import DTYPE, rng_for
from .triggers import Phase, TriggerSpec

logger = logging.getLogger(__name__)

# Rounding slack so that e.g. 0.1 * 1000 counts as 100.
_COUNT_EPS = 1e-9


class Provenance(IntEnum):
    CLEAN = 0
    POISONED = 1
    REVERSED = 2


def fraction_count(frac: float, n: int) -> int:
    """floor(frac * n) robust to binary rounding of ``frac``."""
    return int(math.floor(frac * n + _COUNT_EPS))


@dataclass(frozen=True)
class ImageExample:
    """One image with its label and provenance."""

    pixels: np.ndarray = field(repr=False)
    label: int
    provenance: Provenance = Provenance.CLEAN
    original_label: Optional[int] = None

    def __post_init__(self):
        if self.original_label is None:
            object.__setattr__(self, "original_label", self.label)
        if self.pixels.ndim != 3:
            raise InvalidInputError("an image must be H x W x C")


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered examples sharing one image shape."""

    pixels: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    original_labels: np.ndarray = field(repr=False)
    provenance: np.ndarray = field(repr=False)
    class_count: int

    def __post_init__(self):
        n = self.pixels.shape[0]
        if self.pixels.ndim != 4 or n == 0:
            raise InvalidInputError("a dataset needs a nonempty N x H x W x C pixel array")
        for name in ("labels", "original_labels", "provenance"):
            if getattr(self, name).shape != (n,):
                raise InvalidInputError(f"{name} must have one entry per example")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InvalidInputError("pixels must lie in [0, 1]")
        for labels in (self.labels, self.original_labels):
            if labels.min() < 0 or labels.max() >= self.class_count:
                raise InvalidInputError(f"labels must lie in [0, {self.class_count})")

    @classmethod
    def build(
        cls,
        pixels: np.ndarray,
        labels: np.ndarray,
        class_count: int,
        original_labels: Optional[np.ndarray] = None,
        provenance: Optional[np.ndarray] = None,
    ) -> "LabeledDataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(
            pixels=np.asarray(pixels, dtype=DTYPE),
            labels=labels,
            original_labels=labels.copy() if original_labels is None
            else np.asarray(original_labels, dtype=np.int64),
            provenance=np.full(labels.shape, Provenance.CLEAN, dtype=np.uint8) if provenance is None
            else np.asarray(provenance, dtype=np.uint8),
            class_count=int(class_count),
        )

    @classmethod
    def from_examples(cls, examples: Sequence[ImageExample], class_count: int) -> "LabeledDataset":
        if not examples:
            raise InvalidInputError("a dataset needs at least one example")
        return cls.build(
            np.stack([e.pixels for e in examples]),
            [e.label for e in examples],
            class_count,
            [e.original_label for e in examples],
            [int(e.provenance) for e in examples],
        )

    @classmethod
    def concat(cls, parts: Iterable["LabeledDataset"]) -> "LabeledDataset":
        parts = list(parts)
        if len({p.dims for p in parts}) != 1 or len({p.class_count for p in parts}) != 1:
            raise InvalidInputError("datasets to concatenate must share dims and class count")
        return cls(
            pixels=np.concatenate([p.pixels for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            original_labels=np.concatenate([p.original_labels for p in parts]),
            provenance=np.concatenate([p.provenance for p in parts]),
            class_count=parts[0].class_count,
        )

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def input_dim(self) -> int:
        h, w, c = self.dims
        return h * w * c

    def flat(self) -> np.ndarray:
        """Pixels as ``N x (H*W*C)`` rows."""
        return self.pixels.reshape(len(self), -1)

    def example(self, i: int) -> ImageExample:
        return ImageExample(
            pixels=self.pixels[i].copy(),
            label=int(self.labels[i]),
            provenance=Provenance(int(self.provenance[i])),
            original_label=int(self.original_labels[i]),
        )

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            pixels=self.pixels[idx],
            labels=self.labels[idx],
            original_labels=self.original_labels[idx],
            provenance=self.provenance[idx],
            class_count=self.class_count,
        )

    def count(self, provenance: Provenance) -> int:
        return int(np.count_nonzero(self.provenance == provenance))

    def provenance_counts(self) -> dict:
        return {p.name.lower(): self.count(p) for p in Provenance}


@dataclass(frozen=True)
class ClassTemplates:
    """One template image per class plus the per-pixel noise level."""

    templates: np.ndarray = field(repr=False)
    noise_sigma: float

    @property
    def class_count(self) -> int:
        return self.templates.shape[0]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.templates.shape[1:])

    def classify(self, pixels: np.ndarray) -> np.ndarray:
        """Nearest-template label for each image."""
        flat = pixels.reshape(pixels.shape[0], -1).astype(np.float64)
        centers = self.templates.reshape(self.class_count, -1).astype(np.float64)
        dists = ((flat[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(dists, axis=1)


def make_templates(
    h: int, w: int, c: int, classes: int, noise_sigma: float, seed: int, max_tries: int = 1000
) -> ClassTemplates:
    """Draw pairwise-distinct uniform templates, rejecting near duplicates."""
    if noise_sigma < 0:
        raise InvalidInputError("noise_sigma must be nonnegative")
    rng = rng_for(seed, "templates")
    d = h * w * c
    min_dist = 0.5 * math.sqrt(d) * 0.1
    templates = []
    for _ in range(max_tries):
        candidate = rng.uniform(0.0, 1.0, size=(h, w, c)).astype(DTYPE)
        if all(np.linalg.norm(candidate - t) > min_dist for t in templates):
            templates.append(candidate)
            if len(templates) == classes:
                return ClassTemplates(np.stack(templates), float(noise_sigma))
    raise InvalidInputError(f"could not draw {classes} distinct templates in {max_tries} tries")


def make_dataset(templates: ClassTemplates, n_per_class: int, seed: int) -> LabeledDataset:
    """Balanced noisy draws around each class template, shuffled under ``seed``."""
    if n_per_class < 1:
        raise InvalidInputError("n_per_class must be at least 1")
    rng = rng_for(seed, "data")
    labels = rng.permutation(np.repeat(np.arange(templates.class_count), n_per_class))
    pixels = templates.templates[labels]
    if templates.noise_sigma > 0:
        noise = rng.normal(0.0, templates.noise_sigma, size=pixels.shape)
        pixels = np.clip(pixels + noise, 0.0, 1.0)
    return LabeledDataset.build(pixels, labels, templates.class_count)


def apply_trigger(x: ImageExample, trig: TriggerSpec, phase: Phase = "train") -> ImageExample:
    """Triggered copy of ``x``; label unchanged, provenance marked poisoned."""
    return ImageExample(
        pixels=trig.apply(x.pixels, phase),
        label=x.label,
        provenance=Provenance.POISONED,
        original_label=x.original_label,
    )


@dataclass(frozen=True)
class PoisonPlan:
    """Dirty-label poisoning recipe."""

    rate: float
    target_label: int
    trigger: TriggerSpec
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InvalidInputError(f"poison rate {self.rate} outside [0, 1)")


def poison_dataset(train: LabeledDataset, plan: PoisonPlan) -> LabeledDataset:
    """Trigger and relabel floor(rate * N) non-target examples, then shuffle.

    A zero rate returns the dataset untouched so clean and rate-0 runs
    train identically.
    """
    if plan.rate == 0.0:
        return train
    if not 0 <= plan.target_label < train.class_count:
        raise InvalidInputError(f"target label {plan.target_label} is not a class")
    n_poison = fraction_count(plan.rate, len(train))
    if n_poison < 1:
        raise InvalidInputError(f"rate {plan.rate} poisons no example out of {len(train)}")
    candidates = np.flatnonzero(train.labels != plan.target_label)
    if candidates.size < n_poison:
        raise InvalidInputError(
            f"only {candidates.size} non-target examples available, {n_poison} requested"
        )
    rng = rng_for(plan.seed, "poison")
    chosen = np.sort(rng.choice(candidates, size=n_poison, replace=False))

    pixels = train.pixels.copy()
    pixels[chosen] = plan.trigger.apply(pixels[chosen], "train")
    labels = train.labels.copy()
    labels[chosen] = plan.target_label
    provenance = train.provenance.copy()
    provenance[chosen] = Provenance.POISONED

    order = rng.permutation(len(train))
    logger.debug("poisoned %d of %d examples toward class %d", n_poison, len(train), plan.target_label)
    return LabeledDataset(
        pixels=pixels[order],
        labels=labels[order],
        original_labels=train.original_labels[order],
        provenance=provenance[order],
        class_count=train.class_count,
    )


def make_backdoor_testset(test: LabeledDataset, trig: TriggerSpec, y_t: int) -> LabeledDataset:
    """Triggered (eval phase) non-target test images, all labeled ``y_t``."""
    keep = np.flatnonzero(test.original_labels != y_t)
    if keep.size == 0:
        raise InvalidInputError("every test example belongs to the target class")
    return LabeledDataset(
        pixels=trig.apply(test.pixels[keep], "eval"),
        labels=np.full(keep.size, y_t, dtype=np.int64),
        original_labels=test.original_labels[keep],
        provenance=np.full(keep.size, Provenance.POISONED, dtype=np.uint8),
        class_count=test.class_count,
    )
