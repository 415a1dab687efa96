import json

import pytest

from backdoor_robustness.errors import InvalidInputError
from backdoor_robustness.gates import RobustnessValidator
from backdoor_robustness.reports import RobustnessReport, write_stamped_table, write_table
from backdoor_robustness.trainer import EvalReport


def _report():
    report = RobustnessReport("cafe", 3, source="robustness overview")
    report.add("backdoored", "O-Backdoor", 0.9812, 1.0)
    report.add_eval("pam", "P-Robustness", EvalReport(0.95, 0.025, 400, 300))
    return report


def test_rates_become_two_decimal_percentages():
    header, rows = _report().table()
    assert header == ["model_role", "phase", "c_acc", "asr", "config_hash", "seed"]
    assert rows[0] == ["backdoored", "O-Backdoor", "98.12", "100.00", "cafe", "3"]
    assert rows[1][2:4] == ["95.00", "2.50"]


def test_unknown_phase_is_rejected():
    with pytest.raises(InvalidInputError):
        RobustnessReport("cafe", 0).add("clean", "Mid-Robustness", 0.9, 0.1)


def test_rerun_writes_identical_csv(tmp_path):
    first, meta = _report().write(tmp_path / "a")
    second, _ = _report().write(tmp_path / "b")
    assert first.read_bytes() == second.read_bytes()
    payload = json.loads(meta.read_text())
    assert payload["config_hash"] == "cafe"
    assert payload["source"] == "robustness overview"
    assert "generated_at" in payload


def test_tables_use_fixed_point(tmp_path):
    path = write_table(tmp_path / "t.csv", ["name", "value"], [["x", 1 / 3], ["y", 2]])
    assert path.read_text() == "name,value\nx,0.333333\ny,2\n"
    stamped = write_stamped_table(tmp_path / "s.csv", ["rho", "asr"], [[0.5, 0.25]], "cafe", 4)
    assert stamped.read_text().splitlines() == ["rho,asr,config_hash,seed",
                                                "0.500000,0.250000,cafe,4"]


def test_validator_collects_every_breach():
    gate = RobustnessValidator("fig1")
    assert gate.at_most("purified asr", 0.01, gate.MAX_PURIFIED_ASR)
    assert not gate.at_least("retuned asr", 0.2, gate.MIN_REACTIVATED_ASR)
    assert not gate.all_at_most("robust asr", [0.05, 0.3], gate.MAX_ROBUST_ASR)
    result = gate.result()
    assert not result.is_valid
    assert len(result.issues) == 2
    assert result.metrics["max robust asr"] == 0.3
    assert result.metrics["purified asr"] == 0.01


def test_non_increasing_with_slack():
    gate = RobustnessValidator("poison-rates")
    assert gate.non_increasing("asr", [0.9, 0.9, 0.5])
    assert gate.non_increasing("asr", [0.5, 0.52, 0.4], slack=0.05)
    assert not gate.non_increasing("asr", [0.5, 0.7, 0.4])
    assert gate.result().issues == ["asr increases at positions [1]: [0.5, 0.7, 0.4]"]


def test_non_decreasing_with_slack():
    gate = RobustnessValidator("table8")
    assert gate.non_decreasing("auc", [0.2, 0.2, 0.6])
    assert gate.non_decreasing("auc", [0.5, 0.49, 0.7], slack=0.02)
    assert not gate.non_decreasing("auc", [0.5, 0.3, 0.7])
    assert gate.result().issues == ["auc decreases at positions [1]: [0.5, 0.3, 0.7]"]
