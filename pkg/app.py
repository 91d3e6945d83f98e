# app.py: CLI; all knobs come from config/app.yaml (flags override a few)

from __future__ import annotations
import argparse
import sys
from pathlib import Path

from dotenv import load_dotenv
from loguru import logger

from core.config import dump_config, experiment_config, load_config
from core.errors import EXIT_FAILURE, EXIT_OK, RKHSFlowError, TrainingDivergedError, exit_code_for
from core.utils import ensure_dir

COMMANDS = ("train", "sweep-q", "sweep-qint", "diagnose", "kernel-selftest")

# ─────────────────────────────────────────────────────────────
# Bootstrap
# ─────────────────────────────────────────────────────────────
def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rkhs-flow", description="RKHS flow ResNet training and diagnostics")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default="config/app.yaml", help="YAML or JSON experiment file")
    p.add_argument("--out", default=None, help="output directory (overrides experiment.out_dir)")
    p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit base seed")
    p.add_argument("--emit-svg", action="store_true", help="also render log-scale loss curves")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for sweep cells")
    p.add_argument("--checkpoint", default=None, help="run directory for `diagnose`")
    return p


def _setup_logging(level: str, out_dir: Path) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level)
    logger.add(out_dir / "run.log", level="DEBUG", mode="w")


def _apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    exp = cfg["experiment"]
    if args.out is not None:
        exp["out_dir"] = args.out
    if args.seed is not None:
        exp["seed"] = args.seed
    if args.jobs is not None:
        exp["jobs"] = args.jobs
    if args.emit_svg:
        exp["emit_svg"] = True
    if args.checkpoint is not None:
        cfg["diagnose"]["checkpoint"] = args.checkpoint
    return cfg


# ─────────────────────────────────────────────────────────────
# Commands
# ─────────────────────────────────────────────────────────────
def _dispatch(command: str, exp) -> int:
    from core import experiments

    if command == "train":
        log = experiments.run_train(exp)
        def cert(b):
            return "n/a" if b is None else ("PASS" if b else "FAIL")
        print(f"status={log.status.value} steps={len(log.records) - 1} loss={log.final_loss:.17g} "
              f"rate_certificate={cert(log.rate_certified)} boundedness_certificate={cert(log.bounded_certified)}")
        return EXIT_OK
    if command in ("sweep-q", "sweep-qint"):
        param = "q" if command == "sweep-q" else "q_int"
        summary = experiments.run_sweep(exp, param)
        for v, (mean, std) in sorted(summary.items()):
            print(f"{param}={v} final_mean_loss={mean[-1]:.17g} final_std_loss={std[-1]:.17g}")
        return EXIT_OK
    if command == "diagnose":
        result = experiments.run_diagnose(exp)
        for line in result.lines():
            print(line)
        return EXIT_OK
    checks = experiments.run_kernel_selftest(exp)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAILURE


def main(argv=None) -> int:
    load_dotenv()
    args = _parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        exp = experiment_config(cfg)
        out = ensure_dir(exp.out_dir)
        _setup_logging(cfg["experiment"]["log_level"], out)
        dump_config(cfg, out / "config.resolved.yaml")
        return _dispatch(args.command, exp)
    except TrainingDivergedError as e:
        logger.error(str(e))
        return EXIT_FAILURE
    except RKHSFlowError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
