"""Named reproduction recipes.

Each recipe runs a full experiment from one config, writes its reports under
``<out>/<recipe>/`` and checks its qualitative expectations with
:class:`~backdoor_robustness.gates.RobustnessValidator`. Recipes that average
over ``repro.seeds`` fan the seeds out to ``settings.workers`` processes.
"""
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig, config_hash, parse_config, settings
from .data_forge import LabeledDataset
from .errors import ConfigError
from .gates import GateResult, RobustnessValidator
from .landscape import LmcCurve, barrier_stats, lmc_between_purified, write_curve_csv
from .nn_core import Model
from .pipeline import METHODS, Lab
from .qra import perturb_flat
from .reports import RobustnessReport, write_json, write_stamped_table, write_table
from .trainer import EvalReport

logger = logging.getLogger(__name__)

Pair = Tuple[float, float]
RecipeFn = Callable[[ExperimentConfig, Path], GateResult]

# Experiment each recipe reproduces, stamped into its metadata.
SOURCES = {
    "fig1": "O-ASR vs P-ASR per tuner under the retuning attack",
    "fig3": "backdoor-error paths from the backdoored model to each tuner",
    "fig4": "backdoor and clean error paths between purified models and EP",
    "table1-row": "O-Backdoor / O-Robustness / P-Robustness rows per tuner",
    "table8": "rho sensitivity of path-aware tuning",
    "poison-rates": "backdoor injection across poisoning rates",
    "qra": "QRA lift on the purified target with a clean-model control",
    "qra-transfer": "QRA generator transfer across purification methods",
    "bti-sam": "SAM on the inverted-trigger set vs PAM on the same set",
}

_ARTIFACT_KEY = re.compile(r"^(fig|table)(\d+)")


def artifact_of(name: str) -> Optional[str]:
    """Figure or table a recipe key names, e.g. ``table1-row`` -> ``table 1``."""
    match = _ARTIFACT_KEY.match(name)
    if match is None:
        return None
    kind, number = match.groups()
    return f"{'figure' if kind == 'fig' else 'table'} {number}"


@dataclass
class Suite:
    """Every model of one seed: clean, backdoored and one purified model per tuner."""

    lab: Lab
    clean: Model
    backdoored: Model
    d_mix: LabeledDataset
    purified: Dict[str, Model]


def build_suite(cfg: ExperimentConfig, methods: Sequence[str] = METHODS) -> Suite:
    lab = Lab(cfg)
    clean, backdoored = lab.train_models()
    d_mix = lab.reversed_set(backdoored)
    reference = lab.evaluate(clean).c_acc
    purified = {
        m: lab.purify(backdoored, m, reference_c_acc=reference, d_mix=d_mix, select=True).model
        for m in methods
    }
    return Suite(lab, clean, backdoored, d_mix, purified)


def _pair(report: EvalReport) -> Pair:
    return report.c_acc, report.asr


def fan_out(
    worker: Callable[[dict, int], dict], cfg: ExperimentConfig, seeds: Sequence[int]
) -> List[dict]:
    """Run ``worker(raw_config, seed)`` for every seed, in seed order."""
    raw = cfg.model_dump(mode="json")
    workers = min(settings.workers, len(seeds))
    if workers <= 1:
        return [worker(raw, seed) for seed in seeds]
    logger.info("fanning %d seeds out to %d processes", len(seeds), workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, [raw] * len(seeds), seeds))


def _mean(results: Sequence[Dict[str, Pair]]) -> Dict[str, Pair]:
    keys = results[0].keys()
    return {k: tuple(float(v) for v in np.mean([r[k] for r in results], axis=0)) for k in keys}


def tuner_suite_worker(raw: dict, seed: int) -> Dict[str, Pair]:
    """O-Backdoor, O-Robustness and post-RA P-Robustness (c_acc, asr) for one seed."""
    suite = build_suite(parse_config(raw, seed))
    lab = suite.lab
    out = {
        "clean/O-Backdoor": _pair(lab.evaluate(suite.clean)),
        "backdoored/O-Backdoor": _pair(lab.evaluate(suite.backdoored)),
    }
    for method, model in suite.purified.items():
        out[f"{method}/O-Robustness"] = _pair(lab.evaluate(model))
        out[f"{method}/P-Robustness"] = _pair(lab.evaluate(lab.retune(model)))
    out["clean/P-Robustness"] = _pair(lab.evaluate(lab.retune(suite.clean)))
    return out


def _seed_table(
    path: Path, cfg: ExperimentConfig, seeds: Sequence[int], results: Sequence[Dict[str, Pair]]
) -> Path:
    digest = config_hash(cfg)
    rows = [
        [str(seed), *key.split("/"), c_acc, asr, digest]
        for seed, result in zip(seeds, results)
        for key, (c_acc, asr) in result.items()
    ]
    return write_table(path, ["seed", "model_role", "phase", "c_acc", "asr", "config_hash"], rows)


def _suite_report(cfg: ExperimentConfig, source: str, means: Dict[str, Pair]) -> RobustnessReport:
    report = RobustnessReport(config_hash(cfg), cfg.seed, source)
    for key, (c_acc, asr) in means.items():
        role, phase = key.split("/")
        report.add(role, phase, c_acc, asr)
    return report


def _multi_seed_suite(cfg: ExperimentConfig, out: Path, name: str) -> Dict[str, Pair]:
    seeds = cfg.repro.seeds
    results = fan_out(tuner_suite_worker, cfg, seeds)
    _seed_table(out / f"{name}_seeds.csv", cfg, seeds, results)
    means = _mean(results)
    _suite_report(cfg, SOURCES[name], means).write(out, name)
    return means


def recipe_fig1(cfg: ExperimentConfig, out: Path) -> GateResult:
    """Superficial safety: low O-ASR for plain FT and SAM, high ASR after RA."""
    means = _multi_seed_suite(cfg, out, "fig1")
    gate = RobustnessValidator("fig1")
    for method in ("plain", "sam"):
        gate.at_most(f"{method} O-ASR", means[f"{method}/O-Robustness"][1], gate.MAX_PURIFIED_ASR)
        gate.at_least(f"{method} P-ASR", means[f"{method}/P-Robustness"][1], gate.MIN_REACTIVATED_ASR)
    gate.at_most("clean P-ASR", means["clean/P-Robustness"][1], gate.MAX_CLEAN_MODEL_ASR)
    return gate.result()


def recipe_table1_row(cfg: ExperimentConfig, out: Path) -> GateResult:
    means = _multi_seed_suite(cfg, out, "table1-row")
    gate = RobustnessValidator("table1-row")
    clean_acc = means["clean/O-Backdoor"][0]
    backdoored_acc, backdoored_asr = means["backdoored/O-Backdoor"]
    gate.at_least("backdoored ASR", backdoored_asr, gate.MIN_BACKDOOR_ASR)
    gate.at_most("backdoored C-Acc drop", clean_acc - backdoored_acc, gate.MAX_ACC_DROP)
    gate.at_most("ep O-ASR", means["ep/O-Robustness"][1], gate.MAX_PURIFIED_ASR)
    gate.at_most("ep P-ASR", means["ep/P-Robustness"][1], gate.MAX_ROBUST_ASR)
    pam_acc, pam_asr = means["pam/O-Robustness"]
    gate.at_most("pam O-ASR", pam_asr, gate.MAX_PURIFIED_ASR)
    gate.at_most("pam C-Acc drop", clean_acc - pam_acc, gate.MAX_ACC_DROP)
    gate.at_most("pam P-ASR", means["pam/P-Robustness"][1], gate.MAX_ROBUST_ASR)
    return gate.result()


def rho_sweep_worker(raw: dict, seed: int) -> Dict[str, list]:
    """PAM at every rho of the grid: O-ASR, C-Acc, post-RA P-ASR and the backdoor-error path."""
    cfg = parse_config(raw, seed)
    lab = Lab(cfg)
    clean, backdoored = lab.train_models()
    d_mix = lab.reversed_set(backdoored)
    sweep: Dict[str, list] = {k: [] for k in ("o_asr", "c_acc", "p_asr", "auc", "t_drop", "curves")}
    for rho in sorted(cfg.purify.rho_grid):
        purified = lab.purify(backdoored, "pam", rho=rho, d_mix=d_mix).model
        report = lab.evaluate(purified)
        sweep["o_asr"].append(report.asr)
        sweep["c_acc"].append(report.c_acc)
        sweep["p_asr"].append(lab.evaluate(lab.retune(purified)).asr)
        curve = lab.lmc(backdoored, purified, "backdoor", ("backdoored", f"pam-{rho:g}"))
        stats = barrier_stats(curve)
        sweep["auc"].append(stats.auc)
        sweep["t_drop"].append(stats.t_drop)
        sweep["curves"].append(curve.points)
    sweep["clean_c_acc"] = [lab.evaluate(clean).c_acc]
    return sweep


def recipe_table8(cfg: ExperimentConfig, out: Path) -> GateResult:
    """P-ASR should fall, and the backdoor barrier toward PAM grow, as rho grows.

    Both are checked up to the rho the accuracy rule allows.
    """
    grid = sorted(cfg.purify.rho_grid)
    results = fan_out(rho_sweep_worker, cfg, cfg.repro.seeds)
    mean = {k: np.mean([r[k] for r in results], axis=0) for k in results[0] if k != "curves"}
    rows = [
        [rho, float(mean["o_asr"][i]), float(mean["p_asr"][i]), float(mean["c_acc"][i]),
         float(mean["auc"][i]), float(mean["t_drop"][i])]
        for i, rho in enumerate(grid)
    ]
    write_stamped_table(out / "table8.csv", ["rho", "o_asr", "p_asr", "c_acc", "auc", "t_drop"],
                        rows, config_hash(cfg), cfg.seed)
    # curves of the first seed; the barrier file holds seed means
    for rho, points in zip(grid, results[0]["curves"]):
        curve = LmcCurve(tuple(tuple(p) for p in points), "backdoor",
                         ("backdoored", f"pam-{rho:g}"))
        write_curve_csv(curve, out / f"table8_backdoored_pam_rho{rho:g}.csv")
    write_json(out / "table8_barriers.json", {
        f"{rho:g}": {"auc": float(mean["auc"][i]), "t_drop": float(mean["t_drop"][i])}
        for i, rho in enumerate(grid)
    })

    threshold = float(mean["clean_c_acc"][0]) - cfg.purify.c_acc_margin
    passing = [i for i in range(len(grid)) if mean["c_acc"][i] >= threshold]
    upto = passing[-1] if passing else 0
    gate = RobustnessValidator("table8")
    gate.record("selected rho", grid[upto])
    p_asr = [float(v) for v in mean["p_asr"][: upto + 1]]
    gate.non_increasing("P-ASR over rho", p_asr)
    gate.at_most("P-ASR ratio (selected / smallest rho)",
                 p_asr[-1] / max(p_asr[0], 1e-12), 0.5)
    gate.non_decreasing("backdoor-path AUC over rho", [float(v) for v in mean["auc"][: upto + 1]],
                        slack=gate.BARRIER_SLACK)
    return gate.result()


def recipe_fig3(cfg: ExperimentConfig, out: Path) -> GateResult:
    """Backdoor-error curves from the backdoored model to every tuner."""
    suite = build_suite(cfg)
    lab = suite.lab
    gate = RobustnessValidator("fig3")
    stats = {}
    for method, model in suite.purified.items():
        curve = lab.lmc(suite.backdoored, model, "backdoor", ("backdoored", method))
        write_curve_csv(curve, out / f"fig3_backdoored_{method}.csv")
        stats[method] = barrier_stats(curve)
        gate.at_most(f"{method} t=0 endpoint mismatch",
                     abs(curve.errors[0] - (1.0 - lab.evaluate(suite.backdoored).asr)), 0.0)
        gate.at_most(f"{method} t=1 endpoint mismatch",
                     abs(curve.errors[-1] - (1.0 - lab.evaluate(model).asr)), 0.0)
        if method in ("ep", "pam"):
            held = [e for t, e in curve.points if t >= 0.2]
            gate.all_at_least(f"{method} backdoor error for t>=0.2", held, gate.LMC_HOLD_LEVEL)
    gate.at_most("plain t_drop", stats["plain"].t_drop, 0.5 - 1e-9)
    gate.at_least("pam t_drop", stats["pam"].t_drop, stats["plain"].t_drop)
    write_json(out / "fig3_barriers.json", {m: asdict(s) for m, s in stats.items()})
    return gate.result()


def recipe_fig4(cfg: ExperimentConfig, out: Path) -> GateResult:
    """Paths between each tuner and EP: no backdoor or clean barrier."""
    suite = build_suite(cfg)
    lab = suite.lab
    ep = suite.purified["ep"]
    gate = RobustnessValidator("fig4")
    stats = {}
    for method in ("plain", "sam", "pam"):
        for kind in ("backdoor", "clean"):
            dataset = lab.test_backdoor if kind == "backdoor" else lab.test_clean
            curve = lmc_between_purified(suite.purified[method].params, ep.params, lab.arch, dataset,
                                         cfg.lmc.grid, kind, (method, "ep"))
            write_curve_csv(curve, out / f"fig4_{method}_ep_{kind}.csv")
            stats[f"{method}-ep/{kind}"] = asdict(barrier_stats(curve))
            if kind == "clean":
                gate.all_at_most(f"{method}-ep clean error", curve.errors, gate.MAX_CLEAN_BARRIER)
            elif method == "plain":
                gate.all_at_least("plain-ep backdoor error", curve.errors, gate.SAME_BASIN_LEVEL)
    write_json(out / "fig4_barriers.json", stats)
    return gate.result()


def recipe_poison_rates(cfg: ExperimentConfig, out: Path) -> GateResult:
    """Backdoor injection at every configured poisoning rate."""
    lab = Lab(cfg)
    clean, _ = lab.train_models()
    clean_report = lab.evaluate(clean)
    report = RobustnessReport(lab.config_hash, cfg.seed, SOURCES["poison-rates"])
    report.add_eval("clean", "O-Backdoor", clean_report)
    gate = RobustnessValidator("poison-rates")
    for rate in cfg.repro.rates:
        _, backdoored = lab.train_models(rate)
        result = lab.evaluate(backdoored)
        report.add_eval(f"backdoored-{rate:.2f}", "O-Backdoor", result)
        gate.at_least(f"ASR at rate {rate:.2f}", result.asr, gate.MIN_BACKDOOR_ASR)
        gate.at_most(f"C-Acc drop at rate {rate:.2f}", clean_report.c_acc - result.c_acc, gate.MAX_ACC_DROP)
    report.write(out, "poison_rates")
    return gate.result()


def recipe_qra(cfg: ExperimentConfig, out: Path) -> GateResult:
    """Generator trained against plain FT: lift on its target, no effect on the clean model."""
    suite = build_suite(cfg, ("plain", "ep"))
    lab = suite.lab
    target = suite.purified["plain"]
    gen = lab.train_generator(target, lab.retune(target), suite.purified["ep"])
    on_target = lab.qra_report(gen, target)
    on_clean = lab.qra_report(gen, suite.clean)
    unperturbed = lab.evaluate(target).asr

    rows = [
        ["plain", on_target.c_asr, on_target.p_asr, unperturbed],
        ["clean", on_clean.c_asr, on_clean.p_asr, lab.evaluate(suite.clean).asr],
    ]
    write_stamped_table(out / "qra.csv", ["target_role", "c_asr", "p_asr", "unperturbed_asr"], rows,
                        lab.config_hash, cfg.seed)

    x = np.concatenate([lab.test_clean.flat(), lab.test_backdoor.flat()])
    linf = float(np.max(np.abs(perturb_flat(gen, x).astype(np.float64) - x.astype(np.float64))))

    gate = RobustnessValidator("qra")
    gate.at_least("P-ASR lift on target", on_target.p_asr - unperturbed, gate.MIN_QRA_LIFT)
    gate.at_most("C-ASR on target", on_target.c_asr, gate.MAX_CLEAN_MODEL_ASR)
    gate.at_most("C-ASR on clean model", on_clean.c_asr, gate.MAX_CLEAN_MODEL_ASR)
    gate.at_most("P-ASR on clean model", on_clean.p_asr, gate.MAX_CLEAN_MODEL_ASR)
    gate.at_most("L-inf budget excess", linf - gen.epsilon, 0.0)
    return gate.result()


def qra_transfer_worker(raw: dict, seed: int) -> Dict[str, Pair]:
    """(c_asr, p_asr) of a generator trained on plain FT against every purified model."""
    suite = build_suite(parse_config(raw, seed))
    lab = suite.lab
    source = suite.purified["plain"]
    gen = lab.train_generator(source, lab.retune(source), suite.purified["ep"])
    out = {}
    for method, model in suite.purified.items():
        report = lab.qra_report(gen, model)
        out[method] = (report.c_asr, report.p_asr)
    return out


def recipe_qra_transfer(cfg: ExperimentConfig, out: Path) -> GateResult:
    seeds = cfg.repro.seeds[:3]
    means = _mean(fan_out(qra_transfer_worker, cfg, seeds))
    rows = [[method, c_asr, p_asr] for method, (c_asr, p_asr) in means.items()]
    write_stamped_table(out / "qra_transfer.csv", ["target_role", "c_asr", "p_asr"], rows,
                        config_hash(cfg), cfg.seed)
    gate = RobustnessValidator("qra-transfer")
    gate.at_least("transfer P-ASR on sam", means["sam"][1], 2.0 / cfg.dataset.classes)
    return gate.result()


def recipe_bti_sam(cfg: ExperimentConfig, out: Path) -> GateResult:
    """SAM tuned on the inverted-trigger set against PAM on the same set."""
    lab = Lab(cfg)
    clean, backdoored = lab.train_models()
    d_mix = lab.reversed_set(backdoored)
    models = {
        "bti-sam": lab.sam_on_reversed(backdoored, d_mix),
        "pam": lab.purify(backdoored, "pam", d_mix=d_mix,
                          reference_c_acc=lab.evaluate(clean).c_acc, select=True).model,
    }
    report = RobustnessReport(lab.config_hash, cfg.seed, SOURCES["bti-sam"])
    gate = RobustnessValidator("bti-sam")
    for role, model in models.items():
        report.add_eval(role, "O-Robustness", lab.evaluate(model))
        retuned = lab.evaluate(lab.retune(model))
        report.add_eval(role, "P-Robustness", retuned)
        gate.record(f"{role} P-ASR", retuned.asr)
    gate.at_most("pam P-ASR", gate.metrics["pam P-ASR"], gate.MAX_ROBUST_ASR)
    report.write(out, "bti_sam")
    return gate.result()


RECIPES: Dict[str, RecipeFn] = {
    "fig1": recipe_fig1,
    "fig3": recipe_fig3,
    "fig4": recipe_fig4,
    "table1-row": recipe_table1_row,
    "table8": recipe_table8,
    "poison-rates": recipe_poison_rates,
    "qra": recipe_qra,
    "qra-transfer": recipe_qra_transfer,
    "bti-sam": recipe_bti_sam,
}


def run_recipe(name: str, cfg: ExperimentConfig, out_dir: Path) -> GateResult:
    """Run a named recipe and write its metadata and gate outcome."""
    if name not in RECIPES:
        raise ConfigError("recipe", f"unknown recipe {name!r}; valid: {', '.join(RECIPES)}")
    out = Path(out_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    logger.info("running recipe %s (%s)", name, SOURCES[name])
    gate = RECIPES[name](cfg, out)
    write_json(out / "recipe.json", {
        "recipe": name,
        "artifact": artifact_of(name),
        "source": SOURCES[name],
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "seeds": list(cfg.repro.seeds),
    })
    write_json(out / "gates.json", asdict(gate))
    if gate.is_valid:
        logger.info("recipe %s: all gates passed", name)
    else:
        for issue in gate.issues:
            logger.warning("recipe %s: %s", name, issue)
    return gate
