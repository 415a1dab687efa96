"""Linear mode connectivity scans between two checkpoints."""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Tuple, Union

import numpy as np

from .data_forge import LabeledDataset
from .errors import InvalidInputError
from .nn_core import ArchSpec, Model, ParamVector, param_interpolate
from .trainer import accuracy

logger = logging.getLogger(__name__)

CurveKind = Literal["backdoor", "clean"]

DEFAULT_GRID = 21
DROP_LEVEL = 0.8


@dataclass(frozen=True)
class LmcCurve:
    """Error along the segment from endpoint 0 (t=0) to endpoint 1 (t=1)."""

    points: Tuple[Tuple[float, float], ...]
    kind: CurveKind
    endpoints: Tuple[str, str] = ("w0", "w1")

    def __post_init__(self):
        ts = [t for t, _ in self.points]
        if len(ts) < 2 or ts[0] != 0.0 or ts[-1] != 1.0:
            raise InvalidInputError("a curve must cover t = 0 and t = 1")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvalidInputError("curve t values must be strictly increasing")

    @property
    def ts(self) -> List[float]:
        return [t for t, _ in self.points]

    @property
    def errors(self) -> List[float]:
        return [e for _, e in self.points]


@dataclass(frozen=True)
class BarrierStat:
    max_error: float
    t_at_max: float
    auc: float
    t_drop: float


def grid_points(grid: int) -> List[float]:
    return [j / (grid - 1) for j in range(grid)]


def lmc_scan(
    w0: ParamVector,
    w1: ParamVector,
    arch: ArchSpec,
    dataset: LabeledDataset,
    grid: int = DEFAULT_GRID,
    kind: CurveKind = "backdoor",
    endpoints: Tuple[str, str] = ("w0", "w1"),
) -> LmcCurve:
    """Error of the interpolated model at ``t_j = j / (grid - 1)``.

    ``dataset`` is the triggered test set for the backdoor kind (error = 1 - ASR)
    and the clean test set for the clean kind (error = 1 - accuracy).
    """
    if w0.shape != w1.shape:
        raise InvalidInputError("endpoint parameter vectors differ in length")
    if grid < 2:
        raise InvalidInputError("an LMC grid needs at least two points")
    points = []
    for t in grid_points(grid):
        model = Model(arch, param_interpolate(w0, w1, t))
        points.append((t, 1.0 - accuracy(model, dataset)))
    logger.debug("%s curve %s -> %s: %s", kind, *endpoints, [round(e, 4) for _, e in points])
    return LmcCurve(tuple(points), kind, endpoints)


def lmc_between_purified(
    w_a: ParamVector,
    w_b: ParamVector,
    arch: ArchSpec,
    dataset: LabeledDataset,
    grid: int = DEFAULT_GRID,
    kind: CurveKind = "backdoor",
    endpoints: Tuple[str, str] = ("purified", "ep"),
) -> LmcCurve:
    """Segment between two purified models, typically a tuner and exact purification."""
    return lmc_scan(w_a, w_b, arch, dataset, grid, kind, endpoints)


def barrier_stats(curve: LmcCurve) -> BarrierStat:
    """Peak error, its first location, trapezoidal area and first t with error below 0.8."""
    ts = np.array(curve.ts)
    errors = np.array(curve.errors)
    peak = int(np.argmax(errors))
    auc = float(np.sum(np.diff(ts) * (errors[1:] + errors[:-1]) / 2.0))
    below = np.flatnonzero(errors < DROP_LEVEL)
    return BarrierStat(
        max_error=float(errors[peak]),
        t_at_max=float(ts[peak]),
        auc=auc,
        t_drop=float(ts[below[0]]) if below.size else 1.0,
    )


def write_curve_csv(curve: LmcCurve, path: Union[str, Path]) -> Path:
    """CSV with header ``t,error`` and 6-decimal fixed-point values."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "error"])
        for t, error in curve.points:
            writer.writerow([f"{t:.6f}", f"{error:.6f}"])
    return path
