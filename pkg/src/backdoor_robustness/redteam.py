"""Retuning attack: briefly fine-tune a purified model on a handful of poisoned samples."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .data_forge import LabeledDataset, Provenance
from .errors import InvalidInputError
from .nn_core import Model, SgdConfig, rng_for
from .optimizers import SGD
from .trainer import EvalReport, evaluate, run_optimizer
from .triggers import TriggerSpec

logger = logging.getLogger(__name__)

# RA poison should stay under this share of the poison used at training time.
RA_POISON_SHARE = 0.01


@dataclass(frozen=True)
class RaConfig:
    n_poison: int
    total: int = 1000
    epochs: int = 5
    lr: float = 0.01
    seed: int = 0
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self):
        if self.n_poison < 1:
            raise InvalidInputError("the retuning set needs at least one poisoned sample")
        if self.n_poison >= self.total:
            raise InvalidInputError("n_poison must be smaller than total")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr, self.momentum, self.batch_size, self.epochs, self.seed)


def build_ra_dataset(
    train_pool: LabeledDataset,
    trig: TriggerSpec,
    y_t: int,
    cfg: RaConfig,
    n_train_poisoned: Optional[int] = None,
) -> LabeledDataset:
    """``n_poison`` triggered non-target samples labeled ``y_t`` plus benign fill-up to ``total``."""
    if n_train_poisoned and cfg.n_poison >= RA_POISON_SHARE * n_train_poisoned:
        logger.warning("retuning uses %d poisoned samples, not below 1%% of the %d used in training",
                       cfg.n_poison, n_train_poisoned)
    clean = np.flatnonzero(train_pool.provenance == Provenance.CLEAN)
    non_target = clean[train_pool.labels[clean] != y_t]
    if non_target.size < cfg.n_poison or clean.size < cfg.total:
        raise InvalidInputError(
            f"pool of {clean.size} clean examples cannot supply {cfg.total} retuning samples"
        )
    rng = rng_for(cfg.seed, "ra")
    poison_idx = np.sort(rng.choice(non_target, size=cfg.n_poison, replace=False))
    rest = np.setdiff1d(clean, poison_idx)
    benign_idx = np.sort(rng.choice(rest, size=cfg.total - cfg.n_poison, replace=False))

    source = train_pool.subset(poison_idx)
    poisoned = LabeledDataset(
        pixels=trig.apply(source.pixels, "train"),
        labels=np.full(cfg.n_poison, y_t, dtype=np.int64),
        original_labels=source.original_labels,
        provenance=np.full(cfg.n_poison, Provenance.POISONED, dtype=np.uint8),
        class_count=train_pool.class_count,
    )
    merged = LabeledDataset.concat([poisoned, train_pool.subset(benign_idx)])
    return merged.subset(rng.permutation(len(merged)))


def retuning_attack(purified: Model, ra_set: LabeledDataset, cfg: RaConfig) -> Model:
    """Retune the purified weights for a few epochs on the retuning set."""
    sgd_cfg = cfg.sgd()
    return run_optimizer(purified, ra_set, SGD(sgd_cfg), sgd_cfg, stage="retuning").model


def retuning_trace(
    purified: Model,
    ra_set: LabeledDataset,
    cfg: RaConfig,
    clean_test: LabeledDataset,
    backdoor_test: LabeledDataset,
) -> Tuple[Model, List[EvalReport]]:
    """Retuning attack recording C-Acc/ASR after every epoch."""
    reports: List[EvalReport] = []
    sgd_cfg = cfg.sgd()
    result = run_optimizer(
        purified, ra_set, SGD(sgd_cfg), sgd_cfg, stage="retuning",
        on_epoch=lambda epoch, model: reports.append(evaluate(model, clean_test, backdoor_test)),
    )
    return result.model, reports
