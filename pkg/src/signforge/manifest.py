# src/signforge/manifest.py
import importlib.metadata
import platform
from pathlib import Path

import numpy as np

from signforge.config import config_hash
from signforge.schemas import Manifest, RunConfig

MANIFEST_NAME = "manifest.json"


def get_version_info() -> dict:
    """Get version information."""
    try:
        app_version = importlib.metadata.version("signforge")
    except importlib.metadata.PackageNotFoundError:
        app_version = "unknown"

    return {
        "app": app_version,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def build_manifest(command: str, config: RunConfig, out_dir: Path, artifacts: list[Path]) -> Manifest:
    """Artifacts are listed relative to `out_dir`, in the order they were written."""
    names = []
    for path in artifacts:
        path = Path(path)
        try:
            names.append(path.relative_to(out_dir).as_posix())
        except ValueError:
            names.append(path.as_posix())
    return Manifest(
        command=command,
        config_hash=config_hash(config),
        seed=config.seed,
        artifacts=names,
        version=get_version_info(),
    )


def write_manifest(manifest: Manifest, out_dir: Path) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2) + "\n")
    return path
