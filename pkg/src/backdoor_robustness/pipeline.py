"""Experiment pipeline: every dataset and stage derived from one validated config."""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Optional, Tuple

from .config import ExperimentConfig, config_hash
from .data_forge import (
    LabeledDataset,
    PoisonPlan,
    Provenance,
    make_backdoor_testset,
    make_dataset,
    make_templates,
    poison_dataset,
)
from .errors import ConfigError
from .inversion import InversionConfig, make_reversed_dataset, search_trigger
from .landscape import CurveKind, LmcCurve, lmc_scan
from .nn_core import ArchSpec, Model, SgdConfig, derive_seed
from .purifier import (
    PamConfig,
    SamConfig,
    finetune_ep,
    finetune_plain,
    finetune_sam,
    pam,
    pam_iterations,
    select_rho,
)
from .qra import QraGenerator, QraReport, build_qra_dataset, init_generator, qra_evaluate, qra_train
from .redteam import RaConfig, build_ra_dataset, retuning_attack
from .trainer import EvalReport, evaluate, train
from .triggers import make_trigger

logger = logging.getLogger(__name__)

METHODS = ("plain", "ep", "sam", "pam")

# Child-seed keys for the independent data splits.
_SPLIT_KEYS = {"train": 101, "test": 102, "tune": 103}


@dataclass
class PurifyOutcome:
    method: str
    model: Model
    rho: Optional[float] = None
    rho_c_acc: Dict[float, float] = field(default_factory=dict)


class Lab:
    """Datasets, trigger and stage runners for one experiment config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.seed = cfg.seed
        self.config_hash = config_hash(cfg)
        ds = cfg.dataset
        self.dims = (ds.h, ds.w, ds.c)
        self.arch = ArchSpec(tuple(cfg.layer_widths))
        self.target = cfg.poison.target
        self.templates = make_templates(ds.h, ds.w, ds.c, ds.classes, ds.noise_sigma, cfg.seed)
        self.trigger = make_trigger(cfg.trigger, self.dims)

    def _split(self, name: str, n_per_class: int) -> LabeledDataset:
        return make_dataset(self.templates, n_per_class, derive_seed(self.seed, _SPLIT_KEYS[name]))

    @cached_property
    def train_clean(self) -> LabeledDataset:
        return self._split("train", self.cfg.dataset.n_train_per_class)

    @cached_property
    def test_clean(self) -> LabeledDataset:
        return self._split("test", self.cfg.dataset.n_test_per_class)

    @cached_property
    def tune_clean(self) -> LabeledDataset:
        return self._split("tune", self.cfg.dataset.n_tune_per_class)

    @cached_property
    def test_backdoor(self) -> LabeledDataset:
        return make_backdoor_testset(self.test_clean, self.trigger, self.target)

    def poisoned_train(self, rate: Optional[float] = None) -> LabeledDataset:
        plan = PoisonPlan(self.cfg.poison.rate if rate is None else rate,
                          self.target, self.trigger, self.seed)
        return poison_dataset(self.train_clean, plan)

    @cached_property
    def train_poisoned(self) -> LabeledDataset:
        return self.poisoned_train()

    def train_sgd(self) -> SgdConfig:
        t = self.cfg.train
        return SgdConfig(t.lr, t.momentum, t.batch, t.epochs, self.seed)

    def purify_sgd(self) -> SgdConfig:
        p = self.cfg.purify
        return SgdConfig(p.lr, p.momentum, p.batch, p.epochs, self.seed)

    def evaluate(self, model: Model) -> EvalReport:
        return evaluate(model, self.test_clean, self.test_backdoor)

    def train_models(self, rate: Optional[float] = None) -> Tuple[Model, Model]:
        """(clean, backdoored) models trained from the same seed."""
        clean = train(self.arch, self.train_clean, self.train_sgd())
        backdoored = train(self.arch, self.poisoned_train(rate), self.train_sgd())
        return clean, backdoored

    def reversed_set(self, backdoored: Model) -> LabeledDataset:
        """D_r (inverted-trigger images with true labels) merged with the clean tuning set."""
        inv = self.cfg.purify.inversion
        base = InversionConfig(self.target, inv.lambdas[0], inv.steps, inv.lr, inv.batch, self.seed)
        found = search_trigger(backdoored, self.tune_clean, base, inv.lambdas, inv.asr_floor)
        return make_reversed_dataset(self.tune_clean, found.trigger, self.cfg.purify.reversed_frac,
                                     self.seed)

    def purify(
        self,
        backdoored: Model,
        method: str,
        rho: Optional[float] = None,
        reference_c_acc: Optional[float] = None,
        d_mix: Optional[LabeledDataset] = None,
        select: Optional[bool] = None,
    ) -> PurifyOutcome:
        """Run one tuner on the backdoored model.

        ``reference_c_acc`` anchors the rho-selection threshold (defaults to the
        backdoored model's own C-Acc); ``d_mix`` reuses a reversed set across calls;
        ``select`` overrides ``purify.select_rho``.
        """
        p = self.cfg.purify
        if method not in METHODS:
            raise ConfigError("purify.method", f"unknown method {method!r}; valid: {', '.join(METHODS)}")
        needs_mix = method == "pam" or p.tuning_set == "mixed"
        if needs_mix and d_mix is None:
            d_mix = self.reversed_set(backdoored)
        tuning = d_mix if p.tuning_set == "mixed" else self.tune_clean
        logger.info("purifying with %s on %d examples", method, len(d_mix if method == "pam" else tuning))

        if method == "plain":
            return PurifyOutcome(method, finetune_plain(backdoored, tuning, self.purify_sgd()))
        if method == "ep":
            return PurifyOutcome(
                method, finetune_ep(backdoored, self.tune_clean, self.trigger, p.ep_frac, self.purify_sgd())
            )
        if method == "sam":
            cfg = SamConfig(p.rho_sam, p.lr, p.epochs, p.batch, self.seed, p.momentum)
            return PurifyOutcome(method, finetune_sam(backdoored, tuning, cfg))

        base = PamConfig(p.rho if rho is None else rho, p.lr,
                         pam_iterations(len(d_mix), p.batch, p.epochs), p.batch, self.seed, p.momentum)
        if (p.select_rho if select is None else select) and rho is None:
            reference = self.evaluate(backdoored).c_acc if reference_c_acc is None else reference_c_acc
            choice = select_rho(backdoored.params, self.arch, d_mix, base, p.rho_grid,
                                self.test_clean, reference - p.c_acc_margin)
            return PurifyOutcome(method, choice.model, choice.rho, choice.c_acc)
        return PurifyOutcome(method, pam(backdoored.params, self.arch, d_mix, base), base.rho)

    def sam_on_reversed(self, backdoored: Model, d_mix: LabeledDataset) -> Model:
        """SAM tuned on the reversed + clean set (inversion followed by SAM)."""
        p = self.cfg.purify
        cfg = SamConfig(p.rho_sam, p.lr, p.epochs, p.batch, self.seed, p.momentum)
        return finetune_sam(backdoored, d_mix, cfg)

    def ra_config(self) -> RaConfig:
        r = self.cfg.ra
        return RaConfig(r.n_poison, r.total, r.epochs, r.lr, self.seed, r.momentum, r.batch)

    def retune(self, purified: Model) -> Model:
        ra_set = build_ra_dataset(self.train_clean, self.trigger, self.target, self.ra_config(),
                                  n_train_poisoned=self.train_poisoned.count(Provenance.POISONED))
        return retuning_attack(purified, ra_set, self.ra_config())

    def qra_dataset(self) -> LabeledDataset:
        q = self.cfg.qra
        return build_qra_dataset(self.train_clean, self.trigger, self.target,
                                 q.n_benign, q.n_poisoned, self.seed)

    def train_generator(self, purified: Model, retuned: Model, ep: Model) -> QraGenerator:
        q = self.cfg.qra
        gen = init_generator(self.arch.input_dim, q.hidden, q.epsilon, q.alpha, self.seed)
        return qra_train(gen, purified, retuned, ep, self.qra_dataset(),
                         q.epochs, q.lr, self.seed, q.batch, q.momentum)

    def qra_report(self, gen: QraGenerator, model: Model) -> QraReport:
        return qra_evaluate(gen, model, self.test_clean, self.test_backdoor, self.target)

    def lmc(self, w0: Model, w1: Model, kind: CurveKind,
            endpoints: Tuple[str, str] = ("w0", "w1")) -> LmcCurve:
        dataset = self.test_backdoor if kind == "backdoor" else self.test_clean
        return lmc_scan(w0.params, w1.params, self.arch, dataset, self.cfg.lmc.grid, kind, endpoints)
