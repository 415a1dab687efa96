import numpy as np
import pytest

from backdoor_robustness.config import settings
from backdoor_robustness.data_forge import make_backdoor_testset
from backdoor_robustness.errors import InvalidInputError, TrainingDivergedError
from backdoor_robustness.nn_core import ArchSpec, Model, SgdConfig, init_model, zero_model
from backdoor_robustness.optimizers import SGD
from backdoor_robustness.trainer import (
    accuracy,
    count_correct,
    evaluate,
    iter_batches,
    run_optimizer,
    train,
    train_with_history,
)
from backdoor_robustness.triggers import PatchTrigger

ARCH = ArchSpec((64, 16, 4))


def test_iter_batches_covers_each_epoch():
    batches = iter_batches(10, 4, seed=1)
    epoch = [next(batches) for _ in range(3)]
    assert [len(b) for b in epoch] == [4, 4, 2]
    np.testing.assert_array_equal(np.sort(np.concatenate(epoch)), np.arange(10))
    again = iter_batches(10, 4, seed=1)
    np.testing.assert_array_equal(next(again), epoch[0])


def test_update_count_and_history(small_set):
    result = train_with_history(ARCH, small_set.subset(range(10)), SgdConfig(0.05, batch_size=4))
    assert result.updates == 3
    assert len(result.loss_history) == 1


def test_training_is_deterministic(small_set):
    cfg = SgdConfig(0.05, batch_size=8, epochs=2, seed=3)
    a = train(ARCH, small_set, cfg)
    b = train(ARCH, small_set, cfg)
    np.testing.assert_array_equal(a.params, b.params)


def test_training_learns_templates(tiny_lab, tiny_models):
    clean, _ = tiny_models
    assert accuracy(clean, tiny_lab.test_clean) >= 0.9


def test_epoch_hook_sees_every_epoch(small_set):
    cfg = SgdConfig(0.05, batch_size=8, epochs=3)
    seen = []
    run_optimizer(init_model(ARCH, 0), small_set, SGD(cfg), cfg,
                  on_epoch=lambda epoch, model: seen.append(epoch))
    assert seen == [1, 2, 3]


def test_non_finite_loss_raises(small_set):
    params = np.full(ARCH.n_params, np.nan, dtype=np.float32)
    cfg = SgdConfig(0.05, batch_size=8)
    with pytest.raises(TrainingDivergedError) as info:
        run_optimizer(Model(ARCH, params), small_set, SGD(cfg), cfg, stage="finetune")
    assert info.value.stage == "finetune"
    assert info.value.epoch == 1


def test_dimension_mismatch_raises(small_set):
    cfg = SgdConfig(0.05)
    with pytest.raises(InvalidInputError):
        train(ArchSpec((10, 4)), small_set, cfg)
    with pytest.raises(InvalidInputError):
        train(ArchSpec((64, 3)), small_set, cfg)


def test_evaluate_zero_model(small_set):
    backdoor = make_backdoor_testset(small_set, PatchTrigger(), y_t=0)
    report = evaluate(zero_model(ARCH), small_set, backdoor)
    # ties resolve to class 0, which is also the target
    assert report.c_acc == 0.25
    assert report.asr == 1.0
    assert (report.n_clean, report.n_triggered) == (40, 30)
    assert evaluate(zero_model(ARCH), small_set, backdoor) == report


def test_threaded_counting_matches_sequential(monkeypatch, tiny_lab, tiny_models):
    clean, _ = tiny_models
    expected = count_correct(clean, tiny_lab.test_clean)
    monkeypatch.setattr(settings, "threads", 4)
    assert count_correct(clean, tiny_lab.test_clean) == expected
