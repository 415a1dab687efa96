import copy
import json

import numpy as np
import pytest

from backdoor_robustness.config import parse_config
from backdoor_robustness.data_forge import make_dataset, make_templates
from backdoor_robustness.pipeline import Lab

TINY_RAW = {
    "seed": 7,
    "dataset": {
        "h": 8,
        "w": 8,
        "c": 1,
        "classes": 4,
        "n_train_per_class": 300,
        "n_test_per_class": 50,
        "n_tune_per_class": 60,
        "noise_sigma": 0.1,
    },
    "trigger": {"kind": "patch"},
    "poison": {"rate": 0.1, "target": 0},
    "train": {"hidden": [32], "epochs": 5, "lr": 0.05, "momentum": 0.9, "batch": 32},
    "purify": {
        "epochs": 2,
        "batch": 32,
        "inversion": {"steps": 20, "batch": 32, "lambdas": [0.01]},
    },
    "ra": {"n_poison": 5, "total": 200, "epochs": 1, "batch": 32},
    "qra": {"hidden": 16, "epochs": 1, "batch": 32, "n_benign": 40, "n_poisoned": 40},
    "lmc": {"grid": 5},
    "repro": {"seeds": [7]},
}


@pytest.fixture
def tiny_raw():
    return copy.deepcopy(TINY_RAW)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_raw):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_raw))
    return path


@pytest.fixture(scope="session")
def tiny_lab():
    return Lab(parse_config(copy.deepcopy(TINY_RAW)))


@pytest.fixture(scope="session")
def tiny_models(tiny_lab):
    """(clean, backdoored) models trained once per session."""
    return tiny_lab.train_models()


@pytest.fixture(scope="session")
def templates():
    return make_templates(8, 8, 1, 4, 0.1, seed=3)


@pytest.fixture
def small_set(templates):
    """Balanced 4-class set of 40 examples."""
    return make_dataset(templates, 10, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
