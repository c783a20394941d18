# src/signforge/config.py
"""Loading RunConfig from JSON/YAML files, JSON text, or mappings.

Top-level keys that are not block names are routed into the one primary
block that owns them, so {"tau": 0.2} sets attack.tau. `detector_b` and
`eval` fields must always be given nested.
"""
import hashlib
import json
import logging
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ValidationError

from signforge.schemas import RunConfig

logger = logging.getLogger(__name__)

ROUTED_BLOCKS = ("detector", "training", "scene", "attack", "creation", "sweep", "paths")

THREADS_ENV = "SIGNFORGE_THREADS"
LOG_LEVEL_ENV = "SIGNFORGE_LOG_LEVEL"


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _pointer(loc: tuple) -> str:
    return "/" + "/".join(str(part) for part in loc) if loc else ""


def _block_models() -> dict[str, type[BaseModel]]:
    return {name: RunConfig.model_fields[name].annotation for name in ROUTED_BLOCKS}


def route_flat_keys(data: Mapping[str, Any]) -> dict[str, Any]:
    """Move owned top-level shorthand keys into their blocks."""
    blocks = _block_models()
    routed: dict[str, Any] = {}
    flat: dict[str, Any] = {}
    for key, value in data.items():
        if key in RunConfig.model_fields:
            routed[key] = dict(value) if isinstance(value, Mapping) else value
        else:
            flat[key] = value

    for key, value in flat.items():
        owners = [name for name, model in blocks.items() if key in model.model_fields]
        if not owners:
            routed[key] = value  # left for strict validation to reject
            continue
        if len(owners) > 1:
            candidates = ", ".join(f"/{name}/{key}" for name in owners)
            raise ConfigError(f"ambiguous key, nest it under one of {candidates}", f"/{key}")
        block = routed.setdefault(owners[0], {})
        if not isinstance(block, dict):
            raise ConfigError("expected an object", f"/{owners[0]}")
        if key in block:
            raise ConfigError("given both nested and as a top-level shorthand", f"/{owners[0]}/{key}")
        block[key] = value
    return routed


def _load_text(text: str, yaml_syntax: bool) -> Any:
    try:
        return yaml.safe_load(text) if yaml_syntax else json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML: {e}") from None


def load_source(source: str | Path | Mapping[str, Any]) -> Any:
    if isinstance(source, Mapping):
        return source
    if isinstance(source, str) and source.lstrip().startswith(("{", "[")):
        return _load_text(source, yaml_syntax=False)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror or e}") from None
    return _load_text(text, yaml_syntax=path.suffix in (".yaml", ".yml"))


def parse_config(source: str | Path | Mapping[str, Any], **overrides: Any) -> RunConfig:
    """Strictly validate a config; keyword overrides (e.g. seed=3) replace top-level fields."""
    data = load_source(source)
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"config must be an object, got {type(data).__name__}")
    data = route_flat_keys(data)
    data.update({key: value for key, value in overrides.items() if value is not None})
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        raise ConfigError(error["msg"], _pointer(error["loc"])) from None
    logger.info("resolved config %s", canonical_json(config))
    return config


def canonical_json(config: RunConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def eval_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads


def log_level() -> str:
    level = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError(f"{LOG_LEVEL_ENV} must be a logging level name, got {level!r}")
    return level
