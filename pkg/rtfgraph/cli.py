"""
Command-line entry point for the pipeline.

Exit codes: 0 success, 1 user error (bad configuration, missing inputs,
invalid geometry, malformed containers or checkpoints), 2 internal error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import find_dotenv, load_dotenv

from rtfgraph import pipeline
from rtfgraph.config import RunConfig, config_schema, load_config
from rtfgraph.errors import CheckpointError, ConfigError, ContainerFormatError, GeometryError

logger = logging.getLogger(__name__)

STAGES = ["simulate", "estimate", "train", "eval", "report", "compare", "all"]
LOSSES = ["sbf", "sisdr1", "sisdr2", "stoi", "feature_mse"]
USER_ERRORS = (ConfigError, FileNotFoundError, GeometryError, ContainerFormatError, CheckpointError)

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Graph-refined RTF estimation for MVDR beamforming on simulated rooms")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--stage", choices=STAGES, default="all", help="Pipeline stage to run (default: all)")
    parser.add_argument("--seed", type=int, help="Global seed (also seeds training)")
    parser.add_argument("--t60", type=float, action="append",
                        help="Reverberation time in seconds; repeat for several (default: from config)")
    parser.add_argument("--out-dir", help="Output directory")
    parser.add_argument("--threads", type=int, help="Worker threads (1 is the deterministic reference)")
    parser.add_argument("--loss", choices=LOSSES, help="Training objective")
    parser.add_argument("--mode", choices=["knn", "self"], action="append",
                        help="Graph mode(s) to train (default: from config)")
    parser.add_argument("--checkpoint", help="Checkpoint of the knn model used by eval")
    parser.add_argument("--self-checkpoint", help="Checkpoint of the self-loop model used by eval")
    parser.add_argument("--epochs", type=int, help="Training epochs")
    parser.add_argument("--resume", action="store_true",
                        help="Continue training from the last checkpoints instead of starting over")
    parser.add_argument("--dump-wav", action="store_true", default=None, help="Write WAV files during eval")
    parser.add_argument("--log-level", default=None, help="Logging level (default: RTFGRAPH_LOG_LEVEL or INFO)")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars")
    parser.add_argument("--print-schema", action="store_true", help="Print the configuration JSON schema and exit")
    return parser


def configure_logging(level: Optional[str] = None):
    load_dotenv(find_dotenv(usecwd=True))
    level = (level or os.getenv("RTFGRAPH_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
    )


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "t60s": args.t60,
        "out_dir": args.out_dir,
        "threads": args.threads,
        "train.loss": args.loss,
        "train.epochs": args.epochs,
        "graph_modes": args.mode,
        "dump_wav": args.dump_wav,
        "progress": False if args.no_progress else None,
    }
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    return load_config(args.config, overrides)


def _checkpoints(args: argparse.Namespace) -> dict:
    paths = {}
    if args.checkpoint:
        paths["knn"] = Path(args.checkpoint)
    if args.self_checkpoint:
        paths["self"] = Path(args.self_checkpoint)
    return paths


def run_stage(cfg: RunConfig, stage: str, checkpoints: dict, resume: bool = False):
    if stage == "all":
        return pipeline.run_all(cfg, checkpoints)
    if stage == "report":
        return pipeline.cmd_report(cfg)
    for t60 in cfg.t60s:
        if stage == "simulate":
            pipeline.cmd_simulate(cfg, t60)
        elif stage == "estimate":
            pipeline.cmd_estimate(cfg, t60)
        elif stage == "train":
            for mode in cfg.graph_modes:
                pipeline.cmd_train(cfg, t60, mode, resume=resume)
        elif stage == "eval":
            pipeline.cmd_eval(cfg, t60, checkpoints)
        elif stage == "compare":
            pipeline.cmd_compare(cfg, t60)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_schema:
        print(config_schema())
        return EXIT_OK
    configure_logging(args.log_level)

    try:
        cfg = config_from_args(args)
        logger.info(f"Stage {args.stage}: T60s {cfg.t60s}, seed {cfg.seed}, output {cfg.out_dir}")
        run_stage(cfg, args.stage, _checkpoints(args), args.resume)
    except USER_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USER
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
