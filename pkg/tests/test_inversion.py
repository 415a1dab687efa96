from pathlib import Path

import numpy as np
import pytest

from backdoor_robustness.config import load_config
from backdoor_robustness.data_forge import PoisonPlan, Provenance, poison_dataset
from backdoor_robustness.errors import InvalidInputError
from backdoor_robustness.inversion import (
    InversionConfig,
    ReversedTrigger,
    invert_trigger,
    inversion_loss,
    make_reversed_dataset,
    reversed_asr,
    search_trigger,
)
from backdoor_robustness.nn_core import ArchSpec, init_model
from backdoor_robustness.pipeline import Lab
from backdoor_robustness.triggers import PatchTrigger

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_zero_mask_is_identity(small_set):
    trigger = ReversedTrigger(np.zeros(small_set.dims, dtype=np.float32),
                              np.ones(small_set.dims, dtype=np.float32))
    np.testing.assert_array_equal(trigger.apply(small_set.pixels), small_set.pixels)
    assert trigger.mask_l1 == 0.0


def test_inversion_loss_gradient_matches_finite_differences(rng):
    d = 12
    model = init_model(ArchSpec((d, 3)), seed=4).astype(np.float64)
    xb = rng.uniform(size=(5, d))
    theta = rng.normal(size=2 * d)
    _, grad = inversion_loss(model, xb, 1, theta, 0.01)
    step = 1e-5
    for i in range(2 * d):
        shifted = theta.copy()
        shifted[i] += step
        plus, _ = inversion_loss(model, xb, 1, shifted, 0.01)
        shifted[i] -= 2 * step
        minus, _ = inversion_loss(model, xb, 1, shifted, 0.01)
        assert grad[i] == pytest.approx((plus - minus) / (2 * step), rel=1e-3, abs=1e-6)


def test_invert_trigger_shapes_and_determinism(tiny_lab, tiny_models):
    _, backdoored = tiny_models
    cfg = InversionConfig(target=0, steps=10, batch_size=32, seed=2)
    a = invert_trigger(backdoored, tiny_lab.tune_clean, cfg)
    b = invert_trigger(backdoored, tiny_lab.tune_clean, cfg)
    assert a.mask.shape == tiny_lab.dims and a.pattern.shape == tiny_lab.dims
    np.testing.assert_array_equal(a.mask, b.mask)
    np.testing.assert_array_equal(a.pattern, b.pattern)
    assert 0.0 <= a.mask.min() and a.mask.max() <= 1.0
    assert 0.0 <= reversed_asr(backdoored, tiny_lab.tune_clean, a, 0) <= 1.0


def test_invert_trigger_needs_clean_data(tiny_lab, tiny_models):
    _, backdoored = tiny_models
    dirty = poison_dataset(tiny_lab.tune_clean, PoisonPlan(0.1, 0, PatchTrigger(), seed=1))
    with pytest.raises(InvalidInputError):
        invert_trigger(backdoored, dirty, InversionConfig(target=0, steps=1))


def test_search_trigger_records_every_lambda(tiny_lab, tiny_models):
    _, backdoored = tiny_models
    base = InversionConfig(target=0, steps=5, batch_size=32)
    found = search_trigger(backdoored, tiny_lab.tune_clean, base, [1e-3, 1e-1], asr_floor=0.0)
    assert [lam for lam, _, _ in found.tried] == [1e-3, 1e-1]
    # with a zero floor every trigger qualifies and the smallest mask wins
    assert found.trigger.mask_l1 == min(l1 for _, _, l1 in found.tried)


def test_reversed_dataset_counts(tiny_lab):
    trigger = ReversedTrigger(np.full(tiny_lab.dims, 0.5, dtype=np.float32),
                              np.ones(tiny_lab.dims, dtype=np.float32))
    d_t = tiny_lab.tune_clean
    d_mix = make_reversed_dataset(d_t, trigger, 0.1, seed=3)
    assert len(d_mix) == len(d_t)
    assert d_mix.count(Provenance.REVERSED) == 24
    np.testing.assert_array_equal(d_mix.labels, d_t.labels)
    with pytest.raises(InvalidInputError):
        make_reversed_dataset(d_t, trigger, 0.0)


def test_inversion_config_validation():
    with pytest.raises(InvalidInputError):
        InversionConfig(target=0, lambda_mask=-1.0)
    with pytest.raises(InvalidInputError):
        InversionConfig(target=0, steps=0)


def test_heavy_mask_penalty_erases_the_mask(tiny_lab, tiny_models):
    _, backdoored = tiny_models
    cfg = InversionConfig(target=0, lambda_mask=1e3, steps=20, batch_size=32)
    trigger = invert_trigger(backdoored, tiny_lab.tune_clean, cfg)
    assert trigger.mask_l1 < 1e-3


@pytest.mark.slow
def test_inverted_trigger_lands_on_the_planted_patch():
    lab = Lab(load_config(CONFIGS / "default.json"))
    _, backdoored = lab.train_models()
    inv = lab.cfg.purify.inversion
    base = InversionConfig(lab.target, inv.lambdas[0], inv.steps, inv.lr, inv.batch, lab.seed)
    found = search_trigger(backdoored, lab.tune_clean, base, inv.lambdas, inv.asr_floor)
    assert found.asr >= 0.8
    inside = found.trigger.mask[lab.trigger.region_mask(lab.dims)].sum()
    assert inside >= 0.5 * found.trigger.mask_l1
