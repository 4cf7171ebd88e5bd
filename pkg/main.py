"""
Main Python script for the ExpressNet-MoE pipeline.

The script does the following, one subcommand each:
1) train: fit the model on a labelled face dataset and keep the best checkpoint.
2) eval: report precision/recall/F1/p-Acc and per-sample predictions for a checkpoint.
3) gradcheck: verify every backward rule against finite differences.
4) summary: print the layer table and parameter counts.
5) validate-data / make-fixture: inspect a dataset or generate a synthetic one.

Exit codes: 0 success, 2 configuration, 3 data, 4 numerical, 5 checkpoint, 6 gradient check.
"""

import argparse
import logging
import sys
from typing import List, Optional

from core.config_schema import load_run_config
from core.expression_system import ExpressionRecognitionSystem
from core.run_data_manager import RunDataManager
from utilities.exceptions import ExpressNetError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xnmoe", description="ExpressNet-MoE facial expression recognition")
    parser.add_argument("--config", help="Flat 'key = value' config file applied over the packaged defaults")
    parser.add_argument(
        "--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
        help="Override one config key (repeatable, applied after --config)",
    )
    parser.add_argument("--out", help="Output directory (default: $XNMOE_OUT, then ./runs)")
    parser.add_argument("--seed", type=int, help="Root seed; sub-seeds follow it unless set explicitly")
    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("train", help="Train a model and keep the best checkpoint")
    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    eval_parser.add_argument("--checkpoint", help="Checkpoint to evaluate (default: <out>/best.ckpt)")
    eval_parser.add_argument("--split", help="Split to evaluate (default: eval.split)")
    subparsers.add_parser("gradcheck", help="Finite-difference verification of every backward rule")
    subparsers.add_parser("summary", help="Layer-by-layer parameter table")
    subparsers.add_parser("validate-data", help="Load, split and summarize the dataset")
    subparsers.add_parser("make-fixture", help="Write a deterministic synthetic dataset")
    return parser


def run(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, sets=args.sets, seed=args.seed, out=args.out)
    logging.getLogger().setLevel(config.logging.level.upper())
    RunDataManager(config.out, logger=logger).save_config(config)

    system = ExpressionRecognitionSystem(config, logger=logger)
    if args.command == "train":
        log = system.train()
        print(f"Trained {len(log.records)} epochs; best val_acc {log.best_val_acc:.4f} at epoch {log.best_epoch}")
    elif args.command == "eval":
        system.evaluate(checkpoint=args.checkpoint, split=args.split)
        print(system.data_manager.path("report.txt").read_text(), end="")
    elif args.command == "gradcheck":
        try:
            rows = system.gradcheck()
        finally:
            table = system.data_manager.path("gradcheck.csv")
            if table.exists():
                print(table.read_text(), end="")
        print(f"All {len(rows)} components within tolerance")
    elif args.command == "summary":
        print(system.summary(), end="")
    elif args.command == "validate-data":
        print(system.validate_data().to_string())
    elif args.command == "make-fixture":
        print(system.make_fixture())
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point; returns the process exit code.

    Args:
        argv: Command-line arguments (defaults to ``sys.argv[1:]``)
    """
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ExpressNetError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception:
        logger.exception(f"Unexpected error while running '{args.command}'")
        return 1


if __name__ == "__main__":
    sys.exit(main())
