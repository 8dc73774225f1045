"""BlindQE - CLI Dependencies"""
import argparse
from pathlib import Path
from typing import Any, Dict, Tuple

from app.config import Settings, load_settings
from app.models import DatasetManifest
from app.services.dataset_service import MANIFEST_NAME, read_manifest


class UsageError(Exception):
    """Bad command line; reported with the usage text and exit code 2."""

    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so ``run`` owns exit codes."""

    def error(self, message: str):
        raise UsageError(message, self.format_usage())


def settings_flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_settings_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--key-name`` flag per Settings field; values are validated by Settings."""
    group = parser.add_argument_group("settings overrides")
    for name, field in Settings.model_fields.items():
        group.add_argument(
            settings_flag(name),
            dest=name,
            default=None,
            metavar=name.upper(),
            help=f"override '{name}' (env {name.upper()}, default: {field.default})",
        )


def settings_from_args(args: argparse.Namespace) -> Settings:
    """Defaults < environment < --config file < explicit flags."""
    overrides: Dict[str, Any] = {
        name: getattr(args, name, None) for name in Settings.model_fields
    }
    return load_settings(args.config, overrides)


def resolve_dataset(path: str | Path) -> Tuple[DatasetManifest, Path]:
    """Read a manifest given its dataset directory or the manifest file itself."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    return read_manifest(root / MANIFEST_NAME if path.is_dir() else path), root


def require_file(path: str | Path, flag: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{flag}: no such file: {path}")
    return path
