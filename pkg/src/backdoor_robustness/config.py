"""Configuration for the lab: process settings and experiment files."""
import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError


class Settings(BaseSettings):
    """Process settings read from the environment (prefix ``BPRL_``)."""

    # Evaluation parallelism cap (BPRL_THREADS)
    threads: int = Field(default=1, ge=1)
    # Seed fan-out processes for repro recipes (BPRL_WORKERS)
    workers: int = Field(default=1, ge=1)
    log_level: str = Field(default="INFO")

    model_config = SettingsConfigDict(env_prefix="BPRL_", env_file=".env", extra="ignore")


settings = Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    h: int = Field(gt=0)
    w: int = Field(gt=0)
    c: int = Field(gt=0)
    classes: int = Field(ge=2)
    n_train_per_class: int = Field(ge=1)
    n_test_per_class: int = Field(ge=1)
    n_tune_per_class: int = Field(default=250, ge=1)
    noise_sigma: float = Field(ge=0.0)


class TriggerSection(_Section):
    kind: Literal["patch", "blended"]
    blend_ratio_train: float = Field(default=0.1, ge=0.0, lt=1.0)
    blend_ratio_eval: float = Field(default=0.2, ge=0.0, lt=1.0)
    patch_anchor: Tuple[int, int] = (0, 0)
    blend_seed: int = Field(default=1234, ge=0)


class PoisonSection(_Section):
    rate: float = Field(ge=0.0, lt=1.0)
    target: int = Field(ge=0)


class TrainSection(_Section):
    hidden: List[int] = Field(default_factory=lambda: [128, 64])
    epochs: int = Field(gt=0)
    lr: float = Field(gt=0.0)
    momentum: float = Field(ge=0.0, lt=1.0)
    batch: int = Field(gt=0)


class InversionSection(_Section):
    lambdas: List[float] = Field(default_factory=lambda: [1e-3, 1e-2, 1e-1])
    steps: int = Field(default=300, gt=0)
    lr: float = Field(default=0.1, gt=0.0)
    batch: int = Field(default=64, gt=0)
    asr_floor: float = Field(default=0.8, ge=0.0, le=1.0)


class PurifySection(_Section):
    method: Literal["plain", "ep", "sam", "pam"] = "plain"
    epochs: int = Field(default=10, gt=0)
    lr: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    batch: int = Field(default=64, gt=0)
    ep_frac: float = Field(default=0.10, gt=0.0, lt=1.0)
    rho_sam: float = Field(default=0.5, gt=0.0)
    rho: float = Field(default=0.5, ge=0.0)
    select_rho: bool = False
    rho_grid: List[float] = Field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    c_acc_margin: float = Field(default=0.03, ge=0.0)
    reversed_frac: float = Field(default=0.10, gt=0.0, le=1.0)
    # "mixed" tunes plain/sam on the reversed + clean set PAM uses
    tuning_set: Literal["clean", "mixed"] = "clean"
    inversion: InversionSection = Field(default_factory=InversionSection)


class RaSection(_Section):
    n_poison: int = Field(default=5, gt=0)
    total: int = Field(default=1000, gt=0)
    epochs: int = Field(default=5, gt=0)
    lr: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    batch: int = Field(default=64, gt=0)

    @model_validator(mode="after")
    def _poison_below_total(self) -> "RaSection":
        if self.n_poison >= self.total:
            raise ValueError("n_poison must be smaller than total")
        return self


class QraSection(_Section):
    hidden: int = Field(default=256, ge=1, le=1024)
    epsilon: float = Field(default=16 / 255, gt=0.0)
    alpha: float = Field(default=0.2, ge=0.0)
    epochs: int = Field(default=50, gt=0)
    lr: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    batch: int = Field(default=64, gt=0)
    n_benign: int = Field(default=500, ge=1)
    n_poisoned: int = Field(default=500, ge=1)


class LmcSection(_Section):
    grid: int = Field(default=21, ge=2)


class ReproSection(_Section):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    rates: List[float] = Field(default_factory=lambda: [0.01, 0.05, 0.10])


class ExperimentConfig(_Section):
    """Every hyperparameter of one experiment; unknown keys are rejected."""

    seed: int = Field(ge=0, lt=2**64)
    dataset: DatasetSection
    trigger: TriggerSection
    poison: PoisonSection
    train: TrainSection
    purify: PurifySection = Field(default_factory=PurifySection)
    ra: RaSection = Field(default_factory=RaSection)
    qra: QraSection = Field(default_factory=QraSection)
    lmc: LmcSection = Field(default_factory=LmcSection)
    repro: ReproSection = Field(default_factory=ReproSection)

    @model_validator(mode="after")
    def _cross_checks(self) -> "ExperimentConfig":
        if self.poison.target >= self.dataset.classes:
            raise ValueError("poison.target must be a valid class index")
        row, col = self.trigger.patch_anchor
        if row < 0 or col < 0 or row + 3 > self.dataset.h or col + 3 > self.dataset.w:
            raise ValueError("trigger.patch_anchor places the 3x3 patch outside the image")
        return self

    @property
    def input_dim(self) -> int:
        return self.dataset.h * self.dataset.w * self.dataset.c

    @property
    def layer_widths(self) -> List[int]:
        return [self.input_dim, *self.train.hidden, self.dataset.classes]


def _field_path(loc: Tuple[Union[int, str], ...]) -> str:
    return ".".join(str(part) for part in loc)


def parse_config(raw: dict, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Validate a raw config mapping, applying an optional seed override first."""
    if seed_override is not None:
        raw = {**raw, "seed": seed_override}
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_field_path(first["loc"]), first["msg"]) from e


def load_config(path: Union[str, Path], seed_override: Optional[int] = None) -> ExperimentConfig:
    """Load and validate an experiment JSON file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError("", f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("", f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("", "config root must be a JSON object")
    return parse_config(raw, seed_override)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of a validated config."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
