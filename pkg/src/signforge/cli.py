# src/signforge/cli.py
import argparse
import logging
import logging.config
import sys
from pathlib import Path

from signforge.config import ConfigError, log_level, parse_config
from signforge.manifest import build_manifest, write_manifest
from signforge.pipelines import COMMANDS, run

logger = logging.getLogger(__name__)

DEFAULT_OUT = "./signforge-out"

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def configure_logging(level: str) -> None:
    logging.config.dictConfig({
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
        },
        "handlers": {
            "stderr": {
                "class": "logging.StreamHandler",
                "formatter": "plain",
                "stream": "ext://sys.stderr",
            },
        },
        "root": {"level": level, "handlers": ["stderr"]},
    })


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="signforge",
        description="Physical-style adversarial examples against a toy single-shot detector.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON or YAML config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the config's global seed")
    parser.add_argument("--out", default=DEFAULT_OUT, help=f"output directory (default {DEFAULT_OUT})")
    parser.add_argument(
        "--detector", choices=("a", "b"), default="a",
        help="which detector to train, attack or evaluate (default a)",
    )
    return parser


def _fail(message: str, status: int) -> int:
    print(f"signforge: error: {message}", file=sys.stderr)
    return status


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging(log_level())
        config = parse_config(args.config if args.config else {}, seed=args.seed)
    except ConfigError as e:
        return _fail(str(e), EXIT_USAGE)

    out_dir = Path(args.out)
    try:
        result = run(args.command, config, out_dir, args.detector)
        manifest = build_manifest(args.command, config, out_dir, result.artifacts)
        write_manifest(manifest, out_dir)
    except ValueError as e:
        return _fail(str(e), EXIT_USAGE)
    except (RuntimeError, OSError) as e:
        return _fail(str(e), EXIT_RUNTIME)

    for line in result.summary:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
