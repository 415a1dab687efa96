"""Report emission: robustness rows and generic result tables as CSV + JSON."""
import csv
import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .errors import InvalidInputError
from .trainer import EvalReport

PHASES = ("O-Backdoor", "O-Robustness", "P-Robustness")


@dataclass(frozen=True)
class RobustnessRow:
    """One (model, phase) measurement; rates stored as fractions."""

    model_role: str
    phase: str
    c_acc: float
    asr: float


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def write_table(
    path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence[Any]], decimals: int = 6
) -> Path:
    """CSV with fixed-point floats so reruns produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.{decimals}f}" if isinstance(v, float) else v for v in row])
    return path


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    """JSON sidecar; the only place a timestamp is allowed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {**payload, "generated_at": datetime.now(timezone.utc).isoformat()}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str))
    return path


class RobustnessReport:
    """Rows mirroring the O-Backdoor / O-Robustness / P-Robustness layout."""

    def __init__(self, config_hash: str, seed: int, source: Optional[str] = None):
        """
        Initialize an empty report.

        Args:
            config_hash: Hash of the experiment config every number derives from
            seed: Experiment seed
            source: Figure/table the rows reproduce, recorded in the JSON sidecar
        """
        self.config_hash = config_hash
        self.seed = seed
        self.source = source
        self.rows: List[RobustnessRow] = []

    def add(self, model_role: str, phase: str, c_acc: float, asr: float) -> RobustnessRow:
        if phase not in PHASES:
            raise InvalidInputError(f"unknown report phase {phase!r}")
        row = RobustnessRow(model_role, phase, float(c_acc), float(asr))
        self.rows.append(row)
        return row

    def add_eval(self, model_role: str, phase: str, report: EvalReport) -> RobustnessRow:
        return self.add(model_role, phase, report.c_acc, report.asr)

    def extend(self, other: "RobustnessReport") -> None:
        self.rows.extend(other.rows)

    def table(self) -> Tuple[List[str], List[List[str]]]:
        header = ["model_role", "phase", "c_acc", "asr", "config_hash", "seed"]
        rows = [
            [r.model_role, r.phase, _pct(r.c_acc), _pct(r.asr), self.config_hash, str(self.seed)]
            for r in self.rows
        ]
        return header, rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "source": self.source,
            "rows": [asdict(r) for r in self.rows],
        }

    def write(self, out_dir: Union[str, Path], stem: str = "robustness") -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        header, rows = self.table()
        csv_path = write_table(out_dir / f"{stem}.csv", header, rows)
        json_path = write_json(out_dir / f"{stem}.json", self.to_dict())
        return csv_path, json_path


def write_stamped_table(
    path: Union[str, Path],
    header: Sequence[str],
    rows: Sequence[Sequence[Any]],
    config_hash: str,
    seed: int,
    decimals: int = 6,
) -> Path:
    """``write_table`` with the config hash and seed appended to every row."""
    stamped = [[*row, config_hash, str(seed)] for row in rows]
    return write_table(path, [*header, "config_hash", "seed"], stamped, decimals)
