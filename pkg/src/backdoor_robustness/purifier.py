"""Purification tuners: plain fine-tuning, exact purification, SAM and path-aware minimization."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .data_forge import LabeledDataset, Provenance, fraction_count
from .errors import InvalidInputError
from .nn_core import ArchSpec, Model, ParamVector, SgdConfig, rng_for
from .optimizers import SAM, SGD, PathAware
from .trainer import TrainResult, accuracy, batches_per_epoch, run_optimizer
from .triggers import TriggerSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamConfig:
    """Sharpness-aware fine-tuning schedule."""

    rho_sam: float
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if not self.rho_sam > 0:
            raise InvalidInputError("rho_sam must be positive")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.batch_size, self.epochs, self.seed)


@dataclass(frozen=True)
class PamConfig:
    """Path-aware minimization: step size rho toward the backdoored weights."""

    rho: float
    lr: float = 0.01
    iterations: int = 320
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.rho < 0:
            raise InvalidInputError("rho must be nonnegative")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be positive")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.batch_size, 1, self.seed)


def pam_iterations(n_examples: int, batch_size: int, epochs: int) -> int:
    """Batch count equal to ``epochs`` passes of the shared batch iterator."""
    return epochs * batches_per_epoch(n_examples, batch_size)


def _require_unpoisoned(d_t: LabeledDataset) -> None:
    n_poisoned = d_t.count(Provenance.POISONED)
    if n_poisoned:
        raise InvalidInputError(f"tuning set contains {n_poisoned} poisoned examples")


def finetune_plain_run(model: Model, d_t: LabeledDataset, cfg: SgdConfig) -> TrainResult:
    _require_unpoisoned(d_t)
    return run_optimizer(model, d_t, SGD(cfg), cfg, stage="finetune")


def finetune_plain(model: Model, d_t: LabeledDataset, cfg: SgdConfig) -> Model:
    """Standard SGD fine-tuning from the backdoored weights."""
    return finetune_plain_run(model, d_t, cfg).model


def build_ep_set(d_t: LabeledDataset, trig: TriggerSpec, frac: float, seed: int) -> LabeledDataset:
    """Copy of ``d_t`` with a seeded ``frac`` of images triggered but correctly labeled."""
    if not 0.0 < frac < 1.0:
        raise InvalidInputError(f"triggered fraction {frac} outside (0, 1)")
    n = fraction_count(frac, len(d_t))
    chosen = np.sort(rng_for(seed, "ep").choice(len(d_t), size=n, replace=False))
    pixels = d_t.pixels.copy()
    pixels[chosen] = trig.apply(pixels[chosen], "train")
    provenance = d_t.provenance.copy()
    provenance[chosen] = Provenance.POISONED
    return LabeledDataset(pixels, d_t.labels.copy(), d_t.original_labels.copy(), provenance,
                          d_t.class_count)


def finetune_ep(
    model: Model, d_t: LabeledDataset, trig: TriggerSpec, frac: float = 0.10,
    cfg: SgdConfig = SgdConfig(0.01, epochs=20),
) -> Model:
    """Exact purification: tune on real triggers carrying their true labels."""
    _require_unpoisoned(d_t)
    ep_set = build_ep_set(d_t, trig, frac, cfg.seed)
    logger.info("exact purification with %d triggered of %d tuning examples",
                ep_set.count(Provenance.POISONED), len(ep_set))
    return run_optimizer(model, ep_set, SGD(cfg), cfg, stage="ep").model


def finetune_sam(model: Model, d_t: LabeledDataset, cfg: SamConfig) -> Model:
    """Sharpness-aware fine-tuning (FT-SAM)."""
    _require_unpoisoned(d_t)
    sgd_cfg = cfg.sgd()
    return run_optimizer(model, d_t, SAM(sgd_cfg, cfg.rho_sam), sgd_cfg, stage="sam").model


def pam_run(w0: ParamVector, arch: ArchSpec, d_mix: LabeledDataset, cfg: PamConfig) -> TrainResult:
    if d_mix.count(Provenance.REVERSED) == 0:
        logger.warning("path-aware tuning set has no reversed examples")
    sgd_cfg = cfg.sgd()
    optimizer = PathAware(sgd_cfg, w0, cfg.rho)
    return run_optimizer(Model(arch, w0), d_mix, optimizer, sgd_cfg,
                         iterations=cfg.iterations, stage="pam")


def pam(w0: ParamVector, arch: ArchSpec, d_mix: LabeledDataset, cfg: PamConfig) -> Model:
    """Path-aware minimization starting at (and anchored to) the backdoored weights ``w0``."""
    return pam_run(w0, arch, d_mix, cfg).model


@dataclass
class RhoChoice:
    """Outcome of the accuracy-threshold rule for picking rho."""

    rho: float
    model: Model
    c_acc: Dict[float, float] = field(default_factory=dict)


def select_rho(
    w0: ParamVector,
    arch: ArchSpec,
    d_mix: LabeledDataset,
    base: PamConfig,
    rho_grid: Sequence[float],
    clean_val: LabeledDataset,
    min_c_acc: float,
) -> RhoChoice:
    """Largest rho on the grid whose purified C-Acc stays at or above ``min_c_acc``.

    Falls back to the smallest rho when none qualifies.
    """
    if not rho_grid:
        raise InvalidInputError("rho grid is empty")
    grid = sorted(rho_grid)
    accuracies: Dict[float, float] = {}
    models: Dict[float, Model] = {}
    for rho in grid:
        cfg = PamConfig(rho, base.lr, base.iterations, base.batch_size, base.seed, base.momentum)
        models[rho] = pam(w0, arch, d_mix, cfg)
        accuracies[rho] = accuracy(models[rho], clean_val)
        logger.info("rho %.3f -> C-Acc %.4f", rho, accuracies[rho])
    passing = [rho for rho in grid if accuracies[rho] >= min_c_acc]
    chosen = passing[-1] if passing else grid[0]
    if not passing:
        logger.warning("no rho keeps C-Acc above %.4f; using %.3f", min_c_acc, chosen)
    return RhoChoice(chosen, models[chosen], accuracies)
