from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping, MutableMapping, Tuple

import yaml
from pydantic import ValidationError
from structlog.stdlib import get_logger

from saandet.exceptions import ConfigError
from saandet.models.config import RunConfig

logger = get_logger(__name__)

ENV_PREFIX = "SAAN_"
OUTPUT_ROOT_ENV = "SAAN_OUTPUT_ROOT"
# keys that do not influence results and therefore stay out of the config hash
UNHASHED_KEYS = {"output_dir", "loglevel"}


def _deep_merge(target: MutableMapping[str, Any], source: Mapping[str, Any]) -> MutableMapping[str, Any]:
    for key, value in source.items():
        if isinstance(value, Mapping) and isinstance(target.get(key), MutableMapping):
            _deep_merge(target[key], value)
        else:
            target[key] = value
    return target


def _env_settings(environ: Mapping[str, str]) -> dict[str, Any]:
    """Collect ``SAAN_*`` variables; ``__`` separates nested keys (``SAAN_TRAIN__LR=0.01``)"""
    settings: dict[str, Any] = {}
    for k, v in environ.items():
        if not k.startswith(ENV_PREFIX) or k == OUTPUT_ROOT_ENV:
            continue
        path = [part.lower() for part in k[len(ENV_PREFIX) :].split("__") if part]
        if not path:
            continue
        node = settings
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(v) if v else v
    return settings


def import_settings(
    config_path: Path | str | None = None, overrides: Mapping[str, Any] | None = None
) -> Tuple[RunConfig, bool]:
    """Build the run configuration

    Precedence, lowest first: built-in defaults, the YAML config file, ``SAAN_*`` environment variables and finally
    ``overrides`` (command line flags).

    :return: the validated configuration and whether a config file was found
    """
    settings: dict[str, Any] = {}
    output_root = os.environ.get(OUTPUT_ROOT_ENV)
    if output_root:
        settings["output_dir"] = output_root

    found_config_file = False
    if config_path is not None:
        path = Path(config_path)
        if path.is_file():
            try:
                loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse config file {path}: {e}") from e
            if not isinstance(loaded, Mapping):
                raise ConfigError(f"config file {path} must contain a mapping at the top level")
            _deep_merge(settings, loaded)
            found_config_file = True
        else:
            raise ConfigError(f"config file {path} does not exist")

    _deep_merge(settings, _env_settings(os.environ))
    if overrides:
        _deep_merge(settings, overrides)

    try:
        config = RunConfig.model_validate(settings)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    return config, found_config_file


def config_hash(config: RunConfig) -> str:
    payload = config.model_dump(mode="json", exclude=UNHASHED_KEYS)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
