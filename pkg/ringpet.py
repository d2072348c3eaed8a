"""
ringpet - Main Entry Point.
Thin command router: loads the run configuration, applies CLI overrides and dispatches
to the pipeline stages. Exit code 0 on success, 2 on configuration errors, 3 on numerical failures.
"""
import argparse
import sys

# Core Initialization
from app.core.config import PATTERNS, RunConfig, load_run_config
from app.core.errors import ConfigError, RingPetError
from app.core.logger import logger
from app.db.session import init_db
from app.logic.pipeline_handler import run_pipeline, run_stage, with_run_dir

SUBCOMMANDS = ("phantom", "simulate", "mask", "complete", "recon", "refine", "eval", "report", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ringpet", description="Incomplete-ring PET restoration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the '{name}' stage" if name != "run" else "run every stage in order")
        p.add_argument("--config", required=True, help="dotted key=value run configuration file")
        p.add_argument("--out", default=None, help="run directory (overrides eval.out_dir)")
        p.add_argument("--pattern", type=int, default=None, choices=sorted(PATTERNS),
                       help="evaluate a single named angular-loss pattern")
        p.add_argument("--seed", type=int, default=0, help="offset added to every configured seed")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    cfg = with_run_dir(cfg, args.out)
    if args.pattern is not None:
        cfg = cfg.with_overrides(mask__pattern=args.pattern)
    return cfg.reseeded(args.seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        init_db()
        if args.command == "run":
            run_pipeline(cfg)
        else:
            if args.command == "refine":
                run_stage("quality", cfg)
            run_stage(args.command, cfg)
        return 0
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return e.exit_code
    except RingPetError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
