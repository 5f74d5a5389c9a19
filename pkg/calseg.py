"""
calseg command line.

    calseg <command> [--config FILE] [--set key=value ...] --out DIR

Commands: gen-data, train, eval, sweep-gamma, sweep-threshold,
compare-losses, render-heatmap.

Exit codes: 0 success, 2 configuration error, 3 any other failure.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from audit import audit_log
from errors import ConfigError
from experiments import COMMAND_HANDLERS
from run_config import COMMANDS, load_config, write_resolved_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

logger = logging.getLogger("calseg")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calseg",
        description="Calibration-aware segmentation losses: data generation, training, evaluation and sweeps.",
    )
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", default=None, help="key = value file or YAML file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one setting; may be repeated",
    )
    parser.add_argument("--out", required=True, help="Output directory")
    return parser


def configure_logging() -> None:
    level = os.getenv("CALSEG_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    audit_log.use_file(os.path.join(args.out, "audit_log.json"))
    run_id = os.path.basename(os.path.normpath(args.out))

    try:
        cfg = load_config(args.config, args.overrides)
        write_resolved_config(cfg, args.out)
        result = COMMAND_HANDLERS[args.command](cfg, args.out)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        audit_log.save(args.command, {"success": False, "error": str(e)}, run_id)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception(f"{args.command} failed")
        audit_log.save(args.command, {"success": False, "error": f"{type(e).__name__}: {e}"}, run_id)
        return EXIT_RUNTIME

    audit_log.save(args.command, result, run_id, metadata={k: str(v) for k, v in sorted(cfg.flat().items())})
    summary = audit_log.summary()
    logger.info(
        f"{args.command} finished; outputs in {args.out}; "
        f"audit {summary['successful']}/{summary['total']} entries successful {summary['by_source']}"
    )
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
