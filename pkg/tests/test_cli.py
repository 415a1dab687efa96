import json
import struct

import pytest

from backdoor_robustness import cli
from backdoor_robustness.checkpoint import CheckpointStore
from backdoor_robustness.config import parse_config
from backdoor_robustness.errors import TrainingDivergedError
from backdoor_robustness.nn_core import zero_model
from backdoor_robustness.pipeline import Lab

from .conftest import TINY_RAW


def _write(path, raw):
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Config path and output directory of one ``bprl train`` run."""
    root = tmp_path_factory.mktemp("trained")
    config = _write(root / "tiny.json", TINY_RAW)
    assert cli.main(["train", "--config", config, "--out", str(root / "out")]) == cli.EXIT_OK
    return config, root / "out"


def test_train_writes_checkpoints_and_report(trained):
    _, out = trained
    assert (out / "clean.bprl").exists() and (out / "backdoored.bprl").exists()
    lines = (out / "train_report.csv").read_text().splitlines()
    assert lines[0] == "model_role,phase,c_acc,asr,config_hash,seed"
    assert [line.split(",")[:2] for line in lines[1:]] == [["clean", "O-Backdoor"],
                                                           ["backdoored", "O-Backdoor"]]


def test_train_rerun_is_byte_identical(trained, tmp_path):
    config, out = trained
    assert cli.main(["train", "--config", config, "--out", str(tmp_path)]) == cli.EXIT_OK
    for name in ("clean.bprl", "backdoored.bprl", "train_report.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_missing_field_exits_2(tmp_path, tiny_raw, capsys):
    del tiny_raw["poison"]["rate"]
    config = _write(tmp_path / "bad.json", tiny_raw)
    assert cli.main(["train", "--config", config, "--out", str(tmp_path)]) == cli.EXIT_INVALID
    assert "poison.rate" in capsys.readouterr().err


def test_unknown_method_is_a_usage_error(tiny_config_file, tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["purify", "--config", str(tiny_config_file), "--checkpoint", "x.bprl",
                  "--method", "prune"])
    assert info.value.code == 2


def test_unknown_recipe_lists_valid_names(tiny_config_file, tmp_path, capsys):
    code = cli.main(["repro", "--config", str(tiny_config_file), "--out", str(tmp_path),
                     "--recipe", "fig9"])
    assert code == cli.EXIT_INVALID
    err = capsys.readouterr().err
    assert "fig9" in err and "fig1" in err and "table8" in err


def test_qra_needs_ep_checkpoint(tiny_config_file, tiny_raw, tmp_path, capsys):
    lab = Lab(parse_config(tiny_raw))
    store = CheckpointStore(tmp_path / "ckpt", lab.config_hash, lab.seed)
    purified = store.save_model("purified-plain", zero_model(lab.arch))
    code = cli.main(["attack", "--config", str(tiny_config_file), "--out", str(tmp_path),
                     "--checkpoint", str(purified), "--mode", "qra"])
    assert code == cli.EXIT_INVALID
    assert "ep-checkpoint" in capsys.readouterr().err


def test_checkpoint_from_another_config_is_rejected(trained, tmp_path, tiny_raw, capsys):
    _, out = trained
    config = _write(tmp_path / "other.json", tiny_raw)
    code = cli.main(["purify", "--config", config, "--seed", "8", "--out", str(tmp_path),
                     "--checkpoint", str(out / "backdoored.bprl"), "--method", "plain"])
    assert code == cli.EXIT_INVALID
    assert "expected" in capsys.readouterr().err


def test_lmc_between_identical_checkpoints(trained, tmp_path):
    config, out = trained
    ckpt = str(out / "clean.bprl")
    code = cli.main(["lmc", "--config", config, "--out", str(tmp_path), "--a", ckpt, "--b", ckpt,
                     "--kind", "clean"])
    assert code == cli.EXIT_OK
    rows = (tmp_path / "lmc_clean.csv").read_text().splitlines()
    assert rows[0] == "t,error"
    assert len(rows) == 1 + TINY_RAW["lmc"]["grid"]
    assert rows[1].split(",")[1] == rows[-1].split(",")[1]
    stats = json.loads((tmp_path / "lmc_clean.json").read_text())
    assert stats["endpoints"] == ["clean", "clean"]


def test_pam_without_radius_matches_plain(tmp_path):
    """With rho = 0 and a shared tuning set, PAM and plain fine-tuning write identical bytes."""
    raw = json.loads(json.dumps(TINY_RAW))
    raw["purify"].update({"rho": 0.0, "tuning_set": "mixed"})
    config = _write(tmp_path / "mixed.json", raw)
    # checkpoints are bound to their config hash, so retrain under the mixed config
    assert cli.main(["train", "--config", config, "--out", str(tmp_path)]) == cli.EXIT_OK
    backdoored = str(tmp_path / "backdoored.bprl")
    for method in ("plain", "pam"):
        code = cli.main(["purify", "--config", config, "--out", str(tmp_path),
                         "--checkpoint", backdoored, "--method", method])
        assert code == cli.EXIT_OK
    plain = (tmp_path / "purified-plain.bprl").read_bytes()
    assert plain == (tmp_path / "purified-pam.bprl").read_bytes()
    assert plain != (tmp_path / "backdoored.bprl").read_bytes()


def test_divergence_exits_3(monkeypatch, tiny_config_file, tmp_path, capsys):
    def diverge(cfg, out):
        raise TrainingDivergedError("train", 2, "loss=nan")

    monkeypatch.setattr(cli, "cmd_train", diverge)
    code = cli.main(["train", "--config", str(tiny_config_file), "--out", str(tmp_path)])
    assert code == cli.EXIT_DIVERGED
    assert "diverged at epoch 2" in capsys.readouterr().err


def test_purify_method_comes_from_config(tmp_path, tiny_raw):
    tiny_raw["purify"]["method"] = "ep"
    config = _write(tmp_path / "ep.json", tiny_raw)
    lab = Lab(parse_config(tiny_raw))
    store = CheckpointStore(tmp_path, lab.config_hash, lab.seed)
    backdoored = store.save_model("backdoored", zero_model(lab.arch))
    code = cli.main(["purify", "--config", config, "--out", str(tmp_path),
                     "--checkpoint", str(backdoored)])
    assert code == cli.EXIT_OK
    assert (tmp_path / "purified-ep.bprl").exists()
    assert not (tmp_path / "purified-plain.bprl").exists()
    assert json.loads((tmp_path / "purified-ep.json").read_text())["role"] == "ep"


def test_truncated_checkpoint_exits_2(tiny_config_file, tmp_path, capsys):
    cut = tmp_path / "cut.bprl"
    # valid header announcing three layer widths, then two stray bytes
    cut.write_bytes(struct.pack("<4sIBI", b"BPRL", 1, 0, 3) + b"..")
    code = cli.main(["purify", "--config", str(tiny_config_file), "--out", str(tmp_path),
                     "--checkpoint", str(cut), "--method", "plain"])
    assert code == cli.EXIT_INVALID
    assert "truncated" in capsys.readouterr().err
