"""
Command-line entry point.

Every subcommand runs one or more stages of the experiment inside the run
directory given by --out; stages already completed with unchanged outputs are
skipped, so the subcommands can be chained or re-run freely.

Usage:
    python seqaug.py --config configs/toy.yaml --out runs/toy make-dataset
    python seqaug.py --config configs/toy.yaml --out runs/toy run-experiment
    python seqaug.py --out runs/toy --config configs/toy.yaml report

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error, 1 other.
"""

import argparse
import os
import sys

from dotenv import load_dotenv

from benchmarking.experiment import ExperimentRunner, run_experiment
from common.config import load_config
from common.errors import ConfigError, SeqAugError
from common.log import banner, log, set_debug
from models.numerics import configure_threads

load_dotenv()

COMMANDS = {
    "make-dataset": ("dataset",),
    "train-vae": ("vae",),
    "pretrain-ldm": ("pretrain",),
    "inflate": ("inflate",),
    "finetune-seq": ("finetune",),
    "sample": ("sample",),
    "filter": ("filter_classifier", "filter", "quality"),
    "train-classifier": ("classifiers",),
    "evaluate": ("evaluate",),
    "report": ("report",),
}


def build_parser():
    parser = argparse.ArgumentParser(description="Controllable sequence generation for classifier augmentation")
    parser.add_argument("--config", type=str, default=None, help="YAML config file (defaults: toy scale)")
    parser.add_argument("--seed", type=int, default=None, help="Experiment seed (u64)")
    parser.add_argument("--out", type=str, default=os.getenv("SEQAUG_OUT_DIR"), help="Run directory")
    threads = os.getenv("SEQAUG_THREADS")
    parser.add_argument(
        "--threads",
        type=int,
        default=int(threads) if threads else None,
        help="Torch threads; anything but 1 voids bit-exact replay",
    )
    parser.add_argument("--debug", action="store_true", default=os.getenv("SEQAUG_DEBUG", "0") == "1")
    parser.add_argument("--force", action="store_true", help="Re-run the stages even if their outputs are current")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name)
    sub.add_parser("run-experiment")
    return parser


def resolve_config(args):
    """File values, then CLI flags on top."""
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.experiment.seed = args.seed
    if args.out is not None:
        cfg.experiment.out_dir = args.out
    if args.threads is not None:
        cfg.experiment.threads = args.threads
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    set_debug(args.debug)
    try:
        cfg = resolve_config(args)
        if args.command == "run-experiment":
            run_experiment(cfg)
            return 0

        if not configure_threads(cfg.experiment.threads):
            log(f"threads={cfg.experiment.threads}: outputs are not bit-exact replayable", "WARN")
        runner = ExperimentRunner(cfg)
        banner(f"{args.command.upper()} | config {runner.manifest['config_hash'][:12]} | out {runner.out}")
        for stage in COMMANDS[args.command]:
            runner.run_stage(stage, force=args.force or args.command == "report")
        return 0
    except SeqAugError as e:
        log(f"❌ {type(e).__name__}: {e}", "ERROR")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
