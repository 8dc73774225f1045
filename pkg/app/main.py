"""BlindQE - Command-Line Entry Point"""
import logging
import sys
from typing import List, Optional

from app.cli.commands import COMMANDS, build_parser
from app.cli.dependencies import UsageError, settings_from_args
from app.errors import BlindQEError, ConfigurationError

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def _usage_error(message: str, usage: str) -> int:
    sys.stderr.write(usage)
    sys.stderr.write(f"error: {message}\n")
    return 2


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parse argv, dispatch to a subcommand and map failures to exit codes.

    Returns:
        0 on success, 2 on a usage error, 1 on a runtime failure
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()

    if not argv:
        return _usage_error("a subcommand is required", parser.format_help())
    if not argv[0].startswith("-") and argv[0] not in COMMANDS:
        return _usage_error(
            f"unknown subcommand '{argv[0]}' (choose from {', '.join(COMMANDS)})",
            parser.format_usage(),
        )

    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _usage_error(str(e), e.usage)
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    if args.command is None:
        return _usage_error("a subcommand is required", parser.format_usage())

    try:
        settings = settings_from_args(args)
    except ConfigurationError as e:
        return _usage_error(str(e), parser.format_usage())

    try:
        logging.getLogger().setLevel(settings.log_level)
        logger.debug(f"Running {args.command} with {settings.model_dump()}")
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        return _usage_error(str(e), parser.format_usage())
    except (BlindQEError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        sys.stderr.write(f"error: {e}\n")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
