"""Qualitative acceptance gates checked by the reproduction recipes."""
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, List, Sequence


@dataclass
class GateResult:
    """Outcome of the gates of one recipe run."""

    recipe: str
    is_valid: bool
    issues: List[str]
    metrics: Dict[str, float]
    timestamp: str


class RobustnessValidator:
    """Collects threshold checks and reports every breach."""

    # Desk-scale thresholds
    MAX_PURIFIED_ASR = 0.05
    MIN_BACKDOOR_ASR = 0.95
    MAX_ACC_DROP = 0.03
    MIN_REACTIVATED_ASR = 0.60
    MAX_ROBUST_ASR = 0.10
    MAX_CLEAN_MODEL_ASR = 0.15
    MIN_QRA_LIFT = 0.40
    LMC_DROP_LEVEL = 0.8
    LMC_HOLD_LEVEL = 0.95
    SAME_BASIN_LEVEL = 0.9
    MAX_CLEAN_BARRIER = 0.2
    BARRIER_SLACK = 0.02

    def __init__(self, recipe: str):
        self.recipe = recipe
        self.issues: List[str] = []
        self.metrics: Dict[str, float] = {}

    def record(self, name: str, value: float) -> float:
        self.metrics[name] = float(value)
        return value

    def at_most(self, name: str, value: float, bound: float) -> bool:
        self.record(name, value)
        if value > bound:
            self.issues.append(f"{name} = {value:.4f} exceeds {bound:.4f}")
            return False
        return True

    def at_least(self, name: str, value: float, bound: float) -> bool:
        self.record(name, value)
        if value < bound:
            self.issues.append(f"{name} = {value:.4f} below {bound:.4f}")
            return False
        return True

    def all_at_least(self, name: str, values: Sequence[float], bound: float) -> bool:
        return self.at_least(f"min {name}", min(values), bound)

    def all_at_most(self, name: str, values: Sequence[float], bound: float) -> bool:
        return self.at_most(f"max {name}", max(values), bound)

    def non_increasing(self, name: str, values: Sequence[float], slack: float = 0.0) -> bool:
        breaks = [i for i in range(1, len(values)) if values[i] > values[i - 1] + slack]
        if breaks:
            self.issues.append(f"{name} increases at positions {breaks}: {list(values)}")
            return False
        return True

    def non_decreasing(self, name: str, values: Sequence[float], slack: float = 0.0) -> bool:
        breaks = [i for i in range(1, len(values)) if values[i] < values[i - 1] - slack]
        if breaks:
            self.issues.append(f"{name} decreases at positions {breaks}: {list(values)}")
            return False
        return True

    def result(self) -> GateResult:
        return GateResult(
            recipe=self.recipe,
            is_valid=not self.issues,
            issues=list(self.issues),
            metrics=dict(self.metrics),
            timestamp=datetime.now(timezone.utc).isoformat(),
        )
