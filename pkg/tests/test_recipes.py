import json
from pathlib import Path

import pytest

from backdoor_robustness.config import config_hash, load_config, parse_config
from backdoor_robustness.errors import ConfigError
from backdoor_robustness.recipes import RECIPES, SOURCES, artifact_of, fan_out, run_recipe

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _seed_echo(raw, seed):
    return {"seed": seed, "config_seed": raw["seed"]}


def test_every_recipe_has_a_source():
    assert set(RECIPES) == set(SOURCES)


def test_recipe_keys_name_their_artifact():
    assert artifact_of("fig3") == "figure 3"
    assert artifact_of("table1-row") == "table 1"
    assert artifact_of("table8") == "table 8"
    assert artifact_of("qra-transfer") is None


def test_fan_out_keeps_seed_order(tiny_raw):
    results = fan_out(_seed_echo, parse_config(tiny_raw), [3, 1, 2])
    assert [r["seed"] for r in results] == [3, 1, 2]


def test_unknown_recipe(tiny_raw, tmp_path):
    with pytest.raises(ConfigError) as info:
        run_recipe("fig2", parse_config(tiny_raw), tmp_path)
    assert info.value.field_path == "recipe"


def test_poison_rates_writes_bundle(tiny_raw, tmp_path):
    cfg = parse_config(tiny_raw)
    gate = run_recipe("poison-rates", cfg, tmp_path)
    out = tmp_path / "poison-rates"
    meta = json.loads((out / "recipe.json").read_text())
    assert meta["config_hash"] == config_hash(cfg)
    assert meta["source"] == SOURCES["poison-rates"]
    assert meta["artifact"] is None
    assert json.loads((out / "gates.json").read_text())["is_valid"] == gate.is_valid
    rows = (out / "poison_rates.csv").read_text().splitlines()
    assert len(rows) == 2 + len(cfg.repro.rates)
    assert set(gate.metrics) == {f"{m} at rate {r:.2f}" for r in cfg.repro.rates
                                 for m in ("ASR", "C-Acc drop")}


@pytest.mark.slow
@pytest.mark.parametrize(
    "recipe",
    ["poison-rates", "fig1", "table1-row", "table8", "fig3", "fig4", "qra", "qra-transfer",
     "bti-sam"],
)
def test_default_config_passes_gates(recipe, tmp_path):
    gate = run_recipe(recipe, load_config(CONFIGS / "default.json"), tmp_path)
    assert gate.is_valid, gate.issues


def test_rho_sweep_writes_paths_and_barriers(tiny_raw, tmp_path):
    cfg = parse_config(tiny_raw)
    gate = run_recipe("table8", cfg, tmp_path)
    out = tmp_path / "table8"
    grid = sorted(cfg.purify.rho_grid)
    barriers = json.loads((out / "table8_barriers.json").read_text())
    assert [k for k in barriers if k != "generated_at"] == [f"{rho:g}" for rho in grid]
    for rho in grid:
        rows = (out / f"table8_backdoored_pam_rho{rho:g}.csv").read_text().splitlines()
        assert rows[0] == "t,error" and len(rows) == 1 + cfg.lmc.grid
        assert 0.0 <= barriers[f"{rho:g}"]["auc"] <= 1.0
    header = (out / "table8.csv").read_text().splitlines()[0]
    assert header == "rho,o_asr,p_asr,c_acc,auc,t_drop,config_hash,seed"
    assert "selected rho" in gate.metrics
    assert json.loads((out / "recipe.json").read_text())["artifact"] == "table 8"
