"""Command-line entry point: `tdmix run` and one subcommand per stage."""

import argparse
import logging
import os
import sys
from typing import List, Optional

from tdmix.config import ExperimentConfig, load_config
from tdmix.errors import ConfigError, TdMixError
from tdmix.pipeline import STAGES, build_report, run_pipeline, run_stage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK_FAILED = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdmix", description="TD(0) studies under Markov data")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, needs_config: bool = True) -> None:
        sub.add_argument("--config", required=needs_config, help="experiment JSON file")
        sub.add_argument("--out", help="artifact directory (default: config output_dir)")
        sub.add_argument("--seeds", type=int, help="override the number of training seeds")
        sub.add_argument("--threads", type=int, help="worker processes (default: TDMIX_THREADS)")
        sub.add_argument("--verbose", "-v", action="store_true", help="DEBUG logging")

    run = commands.add_parser("run", help="run the full study")
    common(run)
    run.add_argument(
        "--stage",
        action="append",
        choices=STAGES,
        help="restrict the run to these stages (repeatable)",
    )
    for stage in STAGES:
        common(commands.add_parser(stage, help=f"run the {stage} stage"))
    common(commands.add_parser("report", help="aggregate stage diagnostics"), needs_config=False)
    return parser


def configure_logging(verbose: bool = False) -> None:
    level = "DEBUG" if verbose else os.getenv("TDMIX_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("seeds.n_seeds", "must be >= 1")
        seeds = config.seeds.model_copy(update={"n_seeds": args.seeds, "seeds": None})
        config = config.model_copy(update={"seeds": seeds})
    return config


def _print_report(report) -> None:
    for line in report.lines:
        print(f"{line.name}: {line.verdict.value} {line.detail}".rstrip())


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.command == "report":
            out_dir = args.out
            if out_dir is None and args.config:
                out_dir = load_config(args.config).output_dir
            if out_dir is None:
                raise ConfigError("--out", "report needs --out or --config")
            report = build_report(out_dir)
            _print_report(report)
            return EXIT_CHECK_FAILED if report.failed else EXIT_OK

        config = _apply_overrides(load_config(args.config), args)
        out_dir = args.out or config.output_dir
        if args.command == "run":
            report = run_pipeline(config, out_dir, threads=args.threads, stages=args.stage)
            _print_report(report)
            return EXIT_CHECK_FAILED if report.failed else EXIT_OK

        payload = run_stage(args.command, config, out_dir, threads=args.threads)
        failed = [line for line in payload.get("diagnostics", []) if line["verdict"] == "FAIL"]
        return EXIT_CHECK_FAILED if failed else EXIT_OK
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except TdMixError as e:
        logger.error(f"Run failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
