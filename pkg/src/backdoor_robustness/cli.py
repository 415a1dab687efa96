"""Command-line entry point: ``bprl train|purify|attack|lmc|repro``."""
import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

from .checkpoint import CheckpointStore, load_checkpoint, load_generator
from .config import ExperimentConfig, load_config, settings
from .errors import CheckpointError, ConfigError, InvalidInputError, TrainingDivergedError
from .landscape import barrier_stats, write_curve_csv
from .nn_core import Model
from .pipeline import METHODS, Lab
from .qra import QraGenerator, qra_transfer
from .recipes import RECIPES, run_recipe
from .reports import RobustnessReport, write_json, write_stamped_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_DIVERGED = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=(level or settings.log_level).upper(), format=LOG_FORMAT, force=True)


def cmd_train(cfg: ExperimentConfig, out: Path) -> RobustnessReport:
    """Train the clean and backdoored models and report their O-Backdoor rows."""
    lab = Lab(cfg)
    store = CheckpointStore(out, lab.config_hash, cfg.seed)
    clean, backdoored = lab.train_models()
    store.save_model("clean", clean)
    store.save_model("backdoored", backdoored)

    report = RobustnessReport(lab.config_hash, cfg.seed, "training")
    report.add_eval("clean", "O-Backdoor", lab.evaluate(clean))
    report.add_eval("backdoored", "O-Backdoor", lab.evaluate(backdoored))
    report.write(out, "train_report")
    return report


def cmd_purify(cfg: ExperimentConfig, checkpoint: Path, method: str, out: Path) -> RobustnessReport:
    """Purify a backdoored checkpoint with one tuner."""
    lab = Lab(cfg)
    backdoored, _ = load_checkpoint(checkpoint, lab.config_hash)
    outcome = lab.purify(backdoored, method)

    name = f"purified-{method}"
    extra = {} if outcome.rho is None else {"rho": outcome.rho}
    store = CheckpointStore(out, lab.config_hash, cfg.seed)
    store.save_model(name, outcome.model, role="ep" if method == "ep" else name, **extra)

    report = RobustnessReport(lab.config_hash, cfg.seed, f"purify --method {method}")
    report.add_eval(name, "O-Robustness", lab.evaluate(outcome.model))
    report.write(out, f"purify_{method}")
    return report


def _require(value, field_path: str, message: str):
    if not value:
        raise ConfigError(field_path, message)
    return value


def _train_generator(
    lab: Lab, purified: Model, ep_checkpoint: Optional[Path], store: CheckpointStore
) -> QraGenerator:
    ep_path = _require(ep_checkpoint, "ep-checkpoint",
                       "QRA needs an exact-purification surrogate checkpoint (--ep-checkpoint)")
    ep, _ = load_checkpoint(ep_path, lab.config_hash)
    gen = lab.train_generator(purified, lab.retune(purified), ep)
    store.save_generator("qra-generator", gen)
    return gen


def cmd_attack(
    cfg: ExperimentConfig,
    checkpoint: Path,
    mode: str,
    out: Path,
    ep_checkpoint: Optional[Path] = None,
    targets: Sequence[Path] = (),
    generator: Optional[Path] = None,
) -> Path:
    """Attack a purified checkpoint; returns the path of the emitted report."""
    lab = Lab(cfg)
    purified, meta = load_checkpoint(checkpoint, lab.config_hash)
    store = CheckpointStore(out, lab.config_hash, cfg.seed)
    header = ["target_role", "c_asr", "p_asr", "unperturbed_asr"]

    if mode == "ra":
        retuned = lab.retune(purified)
        store.save_model(f"retuned-{Path(checkpoint).stem}", retuned, role="retuned")
        report = RobustnessReport(lab.config_hash, cfg.seed, "attack --mode ra")
        report.add_eval(meta.role, "O-Robustness", lab.evaluate(purified))
        report.add_eval(meta.role, "P-Robustness", lab.evaluate(retuned))
        csv_path, _ = report.write(out, "attack_ra")
        return csv_path

    if mode == "qra":
        gen = _train_generator(lab, purified, ep_checkpoint, store)
        qra = lab.qra_report(gen, purified)
        rows = [[meta.role, qra.c_asr, qra.p_asr, lab.evaluate(purified).asr]]
        return write_stamped_table(out / "attack_qra.csv", header, rows, lab.config_hash, cfg.seed)

    if mode == "qra-transfer":
        _require(targets, "targets", "qra-transfer needs at least one --targets checkpoint")
        if generator is not None:
            gen, _ = load_generator(generator, lab.config_hash)
        else:
            gen = _train_generator(lab, purified, ep_checkpoint, store)
        rows = []
        for path in targets:
            model, target_meta = load_checkpoint(path, lab.config_hash)
            qra = qra_transfer(gen, model, lab.test_clean, lab.test_backdoor, lab.target,
                               reference=purified)
            rows.append([target_meta.role, qra.c_asr, qra.p_asr, lab.evaluate(model).asr])
        return write_stamped_table(out / "attack_qra_transfer.csv", header, rows,
                                   lab.config_hash, cfg.seed)

    raise ConfigError("mode", f"unknown attack mode {mode!r}; valid: ra, qra, qra-transfer")


def cmd_lmc(cfg: ExperimentConfig, a: Path, b: Path, kind: str, out: Path) -> Path:
    """Scan the segment between two checkpoints; writes the curve CSV and barrier JSON."""
    lab = Lab(cfg)
    w0, meta_a = load_checkpoint(a, lab.config_hash)
    w1, meta_b = load_checkpoint(b, lab.config_hash)
    curve = lab.lmc(w0, w1, kind, (meta_a.role, meta_b.role))
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_curve_csv(curve, out / f"lmc_{kind}.csv")
    write_json(out / f"lmc_{kind}.json", {
        **asdict(barrier_stats(curve)),
        "kind": kind,
        "endpoints": list(curve.endpoints),
        "grid": cfg.lmc.grid,
        "config_hash": lab.config_hash,
        "seed": cfg.seed,
    })
    return csv_path


def cmd_repro(cfg: ExperimentConfig, recipe: str, out: Path) -> bool:
    """Run a named recipe; returns whether every gate passed."""
    return run_recipe(recipe, cfg, out).is_valid


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, type=Path, help='Experiment JSON file')
    common.add_argument('--out', default=Path('runs'), type=Path, help='Output directory')
    common.add_argument('--seed', type=int, help='Override the config seed')

    parser = argparse.ArgumentParser(prog="bprl", description="Backdoor purification robustness lab")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser('train', parents=[common], help='Train clean and backdoored models')

    purify = sub.add_parser('purify', parents=[common], help='Purify a backdoored checkpoint')
    purify.add_argument('--checkpoint', required=True, type=Path, help='Backdoored checkpoint')
    purify.add_argument('--method', choices=METHODS, help='Tuner; defaults to purify.method')

    attack = sub.add_parser('attack', parents=[common], help='Attack a purified checkpoint')
    attack.add_argument('--checkpoint', required=True, type=Path, help='Purified checkpoint')
    attack.add_argument('--mode', choices=['ra', 'qra', 'qra-transfer'], required=True)
    attack.add_argument('--ep-checkpoint', type=Path, help='EP surrogate for QRA training')
    attack.add_argument('--targets', nargs='+', type=Path, default=[],
                        help='Purified checkpoints a QRA generator is transferred to')
    attack.add_argument('--generator', type=Path, help='Trained QRA generator checkpoint')

    lmc = sub.add_parser('lmc', parents=[common], help='Scan the segment between two checkpoints')
    lmc.add_argument('--a', required=True, type=Path, help='Checkpoint at t=0')
    lmc.add_argument('--b', required=True, type=Path, help='Checkpoint at t=1')
    lmc.add_argument('--kind', choices=['backdoor', 'clean'], default='backdoor')

    repro = sub.add_parser('repro', parents=[common], help=f"Run a recipe ({', '.join(RECIPES)})")
    repro.add_argument('--recipe', required=True)
    return parser


def dispatch(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    if args.command == "train":
        cmd_train(cfg, args.out)
    elif args.command == "purify":
        cmd_purify(cfg, args.checkpoint, args.method or cfg.purify.method, args.out)
    elif args.command == "attack":
        cmd_attack(cfg, args.checkpoint, args.mode, args.out,
                   args.ep_checkpoint, args.targets, args.generator)
    elif args.command == "lmc":
        cmd_lmc(cfg, args.a, args.b, args.kind, args.out)
    elif args.command == "repro":
        cmd_repro(cfg, args.recipe, args.out)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns 0, 2 (invalid input) or 3 (divergence)."""
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        cfg = load_config(args.config, args.seed)
        dispatch(cfg, args)
    except (ConfigError, InvalidInputError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
