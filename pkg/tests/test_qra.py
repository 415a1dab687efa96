import numpy as np
import pytest

from backdoor_robustness.data_forge import Provenance
from backdoor_robustness.errors import InvalidInputError
from backdoor_robustness.nn_core import ArchSpec, checksum, forward, log_softmax, zero_model
from backdoor_robustness.qra import (
    QraGenerator,
    build_qra_dataset,
    init_generator,
    perturb,
    perturb_flat,
    qra_apply,
    qra_evaluate,
    qra_objective,
    qra_train,
    qra_transfer,
    zero_generator,
)


def test_zero_generator_is_a_no_op(small_set):
    gen = zero_generator(small_set.input_dim, hidden=8)
    np.testing.assert_array_equal(perturb(gen, small_set.pixels), small_set.pixels)


def test_budget_holds_exactly(small_set):
    gen = init_generator(small_set.input_dim, hidden=8, epsilon=16 / 255, seed=3)
    loud = gen.with_params(gen.mlp.params * 50)
    x = small_set.flat()
    out = perturb_flat(loud, x)
    assert np.abs(out.astype(np.float64) - x.astype(np.float64)).max() <= 16 / 255
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(out, x)
    np.testing.assert_array_equal(out, perturb_flat(loud, x))


def test_qra_apply_keeps_label(small_set):
    gen = init_generator(small_set.input_dim, hidden=8, seed=1)
    example = small_set.example(3)
    perturbed = qra_apply(gen, example)
    assert perturbed.label == example.label
    assert perturbed.pixels.shape == example.pixels.shape


def test_generator_must_be_square():
    with pytest.raises(InvalidInputError):
        QraGenerator(zero_model(ArchSpec((4, 3))))
    with pytest.raises(InvalidInputError):
        QraGenerator(zero_model(ArchSpec((4, 4))), epsilon=-0.1)


def test_kl_vanishes_when_models_agree(tiny_lab, tiny_models):
    clean, _ = tiny_models
    gen = zero_generator(tiny_lab.arch.input_dim, hidden=8, alpha=0.0)
    xb = tiny_lab.tune_clean.flat()[:16]
    log_q = log_softmax(forward(clean, xb))
    loss, grad = qra_objective(gen, gen.mlp.params, xb, tiny_lab.tune_clean.labels[:16], log_q,
                               clean, clean)
    assert loss == 0.0
    assert grad.shape == gen.mlp.params.shape


def test_zero_budget_generator_gets_no_gradient(tiny_lab, tiny_models):
    clean, backdoored = tiny_models
    gen = init_generator(tiny_lab.arch.input_dim, hidden=8, epsilon=0.0, alpha=0.2, seed=5)
    xb = tiny_lab.tune_clean.flat()[:16]
    log_q = log_softmax(forward(backdoored, xb))
    loss, grad = qra_objective(gen, gen.mlp.params, xb, tiny_lab.tune_clean.labels[:16], log_q,
                               clean, clean)
    assert loss > 0.0
    assert not grad.any()


def test_training_leaves_classifiers_untouched(tiny_lab, tiny_models):
    clean, backdoored = tiny_models
    d_c = build_qra_dataset(tiny_lab.train_clean, tiny_lab.trigger, 0, 20, 20, seed=1)
    gen = init_generator(tiny_lab.arch.input_dim, hidden=8, seed=2)
    before = [checksum(m.params) for m in (clean, backdoored)]
    trained = qra_train(gen, clean, backdoored, clean, d_c, epochs=1, batch_size=16)
    assert [checksum(m.params) for m in (clean, backdoored)] == before
    assert not np.array_equal(trained.mlp.params, gen.mlp.params)
    np.testing.assert_array_equal(
        trained.mlp.params,
        qra_train(gen, clean, backdoored, clean, d_c, epochs=1, batch_size=16).mlp.params,
    )


def test_qra_dataset_keeps_original_labels(tiny_lab):
    d_c = build_qra_dataset(tiny_lab.train_clean, tiny_lab.trigger, 0, 40, 30, seed=5)
    assert len(d_c) == 70
    assert d_c.count(Provenance.POISONED) == 30
    np.testing.assert_array_equal(d_c.labels, d_c.original_labels)
    assert (d_c.labels[d_c.provenance == Provenance.POISONED] != 0).all()


def test_evaluate_and_transfer(tiny_lab, tiny_models):
    clean, backdoored = tiny_models
    gen = zero_generator(tiny_lab.arch.input_dim, hidden=8)
    report = qra_evaluate(gen, backdoored, tiny_lab.test_clean, tiny_lab.test_backdoor, 0)
    # a zero generator leaves P-ASR at the model's plain ASR
    assert report.p_asr == tiny_lab.evaluate(backdoored).asr
    assert qra_transfer(gen, clean, tiny_lab.test_clean, tiny_lab.test_backdoor, 0,
                        reference=backdoored) == qra_evaluate(gen, clean, tiny_lab.test_clean,
                                                              tiny_lab.test_backdoor, 0)
    other = zero_model(ArchSpec((tiny_lab.arch.input_dim, 4)))
    with pytest.raises(InvalidInputError):
        qra_transfer(gen, other, tiny_lab.test_clean, tiny_lab.test_backdoor, 0, reference=clean)
