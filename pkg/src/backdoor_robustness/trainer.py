"""Training loops and the C-Acc / ASR evaluator."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional

import numpy as np

from .config import settings
from .data_forge import LabeledDataset
from .errors import InvalidInputError, TrainingDivergedError
from .nn_core import ArchSpec, Model, SgdConfig, init_model, loss_and_grad, predict, rng_for
from .optimizers import SGD, Optimizer

logger = logging.getLogger(__name__)

EpochHook = Callable[[int, Model], None]


@dataclass(frozen=True)
class EvalReport:
    """Clean accuracy on the clean test set and attack success on the triggered set."""

    c_acc: float
    asr: float
    n_clean: int
    n_triggered: int


@dataclass
class TrainResult:
    """Outcome of one optimization loop."""

    model: Model
    loss_history: List[float] = field(default_factory=list)
    updates: int = 0


def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def iter_batches(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless minibatch indices: one seeded permutation per epoch, last batch kept short."""
    rng = rng_for(seed, "shuffle")
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def check_dims(arch: ArchSpec, data: LabeledDataset) -> None:
    if data.input_dim != arch.input_dim:
        raise InvalidInputError(
            f"dataset images have {data.input_dim} values, architecture expects {arch.input_dim}"
        )
    if data.class_count != arch.output_dim:
        raise InvalidInputError(
            f"dataset has {data.class_count} classes, architecture outputs {arch.output_dim}"
        )


def run_optimizer(
    model: Model,
    data: LabeledDataset,
    optimizer: Optimizer,
    cfg: SgdConfig,
    iterations: Optional[int] = None,
    stage: str = "train",
    on_epoch: Optional[EpochHook] = None,
) -> TrainResult:
    """Drive ``optimizer`` over seeded minibatches of ``data``.

    Runs ``cfg.epochs`` passes unless ``iterations`` (a batch count) is given.
    """
    check_dims(model.arch, data)
    x = data.flat()
    y = data.labels
    per_epoch = batches_per_epoch(len(data), cfg.batch_size)
    total = iterations if iterations is not None else cfg.epochs * per_epoch
    if total < 1:
        raise InvalidInputError("an optimization loop needs at least one update")

    params = model.params.copy()
    batches = iter_batches(len(data), cfg.batch_size, cfg.seed)
    history: List[float] = []
    epoch_losses: List[float] = []
    for i in range(total):
        idx = next(batches)
        xb, yb = x[idx], y[idx]

        def closure(p):
            return loss_and_grad(model.with_params(p), xb, yb)

        params, loss = optimizer.step(params, closure)
        epoch = i // per_epoch + 1
        if not math.isfinite(loss) or not np.isfinite(params).all():
            raise TrainingDivergedError(stage, epoch, f"loss={loss}")
        epoch_losses.append(loss)
        if (i + 1) % per_epoch == 0 or i + 1 == total:
            history.append(float(np.mean(epoch_losses)))
            epoch_losses = []
            logger.debug("%s epoch %d loss %.6f", stage, epoch, history[-1])
            if on_epoch is not None:
                on_epoch(epoch, model.with_params(params))
    return TrainResult(model.with_params(params), history, total)


def train_with_history(arch: ArchSpec, data: LabeledDataset, cfg: SgdConfig) -> TrainResult:
    """Train a freshly initialized network; poisoned labels are used as given."""
    model = init_model(arch, cfg.seed)
    result = run_optimizer(model, data, SGD(cfg), cfg, stage="train")
    logger.info("trained %s for %d updates, final loss %.4f",
                arch.layer_widths, result.updates, result.loss_history[-1])
    return result


def train(arch: ArchSpec, data: LabeledDataset, cfg: SgdConfig) -> Model:
    return train_with_history(arch, data, cfg).model


def _count_correct(model: Model, x: np.ndarray, labels: np.ndarray) -> int:
    return int(np.count_nonzero(predict(model, x) == labels))


def count_correct(model: Model, data: LabeledDataset, pixels: Optional[np.ndarray] = None) -> int:
    """Examples whose argmax matches their label; chunks run on ``settings.threads`` threads."""
    x = data.flat() if pixels is None else pixels.reshape(len(data), -1)
    threads = settings.threads
    if threads <= 1 or len(data) < 2 * threads:
        return _count_correct(model, x, data.labels)
    chunks = np.array_split(np.arange(len(data)), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        counts = pool.map(lambda idx: _count_correct(model, x[idx], data.labels[idx]), chunks)
    return sum(counts)


def accuracy(model: Model, data: LabeledDataset) -> float:
    return count_correct(model, data) / len(data)


def evaluate(model: Model, clean_test: LabeledDataset, backdoor_test: LabeledDataset) -> EvalReport:
    """C-Acc on ``clean_test``; ASR as the target-label hit rate on ``backdoor_test``."""
    for data in (clean_test, backdoor_test):
        check_dims(model.arch, data)
    return EvalReport(
        c_acc=count_correct(model, clean_test) / len(clean_test),
        asr=count_correct(model, backdoor_test) / len(backdoor_test),
        n_clean=len(clean_test),
        n_triggered=len(backdoor_test),
    )
