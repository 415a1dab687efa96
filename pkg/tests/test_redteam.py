import logging

import numpy as np
import pytest

from backdoor_robustness.data_forge import Provenance, make_dataset
from backdoor_robustness.errors import InvalidInputError
from backdoor_robustness.redteam import RaConfig, build_ra_dataset, retuning_attack, retuning_trace
from backdoor_robustness.triggers import PatchTrigger


@pytest.fixture
def pool(templates):
    return make_dataset(templates, 300, seed=21)


def test_ra_set_mixes_five_poisoned_into_thousand(pool):
    ra_set = build_ra_dataset(pool, PatchTrigger(), 2, RaConfig(n_poison=5, total=1000, seed=4))
    assert len(ra_set) == 1000
    flagged = ra_set.provenance == Provenance.POISONED
    assert flagged.sum() == 5
    assert (ra_set.labels[flagged] == 2).all()
    assert (ra_set.original_labels[flagged] != 2).all()
    assert ra_set.count(Provenance.CLEAN) == 995


def test_ra_selection_is_deterministic(pool):
    cfg = RaConfig(n_poison=5, total=300, seed=9)
    a = build_ra_dataset(pool, PatchTrigger(), 0, cfg)
    b = build_ra_dataset(pool, PatchTrigger(), 0, cfg)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_ra_pool_too_small(templates):
    small = make_dataset(templates, 10, seed=1)
    with pytest.raises(InvalidInputError):
        build_ra_dataset(small, PatchTrigger(), 0, RaConfig(n_poison=5, total=1000))


def test_ra_warns_when_poison_is_not_a_small_share(caplog, pool):
    with caplog.at_level(logging.WARNING, logger="backdoor_robustness.redteam"):
        build_ra_dataset(pool, PatchTrigger(), 0, RaConfig(n_poison=5, total=100), n_train_poisoned=100)
    assert "not below 1%" in caplog.text


def test_ra_config_validation():
    with pytest.raises(InvalidInputError):
        RaConfig(n_poison=0)
    with pytest.raises(InvalidInputError):
        RaConfig(n_poison=10, total=10)


def test_trace_reports_each_epoch(tiny_lab, tiny_models):
    clean, _ = tiny_models
    cfg = RaConfig(n_poison=5, total=200, epochs=2, batch_size=32, seed=1)
    ra_set = build_ra_dataset(tiny_lab.train_clean, tiny_lab.trigger, tiny_lab.target, cfg)
    model, reports = retuning_trace(clean, ra_set, cfg, tiny_lab.test_clean, tiny_lab.test_backdoor)
    assert len(reports) == 2
    np.testing.assert_array_equal(model.params, retuning_attack(clean, ra_set, cfg).params)
    assert all(0.0 <= r.asr <= 1.0 for r in reports)
