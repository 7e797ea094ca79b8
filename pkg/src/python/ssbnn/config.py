"""
ssbnn Configuration
===================

Run-specification files (YAML or JSON, picked by suffix) and logging setup
from a ``logging.config.dictConfig`` YAML document.
"""

import json
import logging
import logging.config
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from .data.validators import ValidationError, validate_run_spec
from .errors import InvalidParameterError

LOG_CONFIG_ENV = "SSBNN_LOG_CONFIG"
LOG_LEVEL_ENV = "SSBNN_LOG_LEVEL"
DEFAULT_LOG_CONFIG = Path(__file__).parent / "resources" / "logging.yaml"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def load_config(config_file: str) -> Dict[str, Any]:
    """Load a configuration mapping from a YAML or JSON file"""
    config_path = Path(config_file)

    if not config_path.exists():
        raise InvalidParameterError(f"Configuration file not found: {config_file}")

    try:
        if config_path.suffix.lower() in ['.yaml', '.yml']:
            with open(config_path, 'r') as f:
                data = yaml.safe_load(f)
        elif config_path.suffix.lower() == '.json':
            with open(config_path, 'r') as f:
                data = json.load(f)
        else:
            raise InvalidParameterError(f"Unsupported configuration format: {config_path.suffix}")
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ValidationError(f"Could not parse {config_file}: {e}")
    return data or {}


def load_run_spec(config_file: str) -> Dict[str, Any]:
    spec = load_config(config_file)
    validate_run_spec(spec)
    return spec


def to_default_map(spec: Dict[str, Any], commands: Iterable[str]) -> Dict[str, Dict[str, Any]]:
    """Spread top-level keys over every subcommand; ``commands.<name>`` entries win."""
    shared = {k: v for k, v in spec.items() if k != "commands"}
    per_command = spec.get("commands", {})
    return {name: {**shared, **per_command.get(name, {})} for name in commands}


def setup_logging(level: Optional[str] = None, config_file: Optional[str] = None) -> None:
    """Configure logging once for the process.

    ``config_file`` (or ``$SSBNN_LOG_CONFIG``) replaces the packaged YAML;
    ``level`` (or ``$SSBNN_LOG_LEVEL``) overrides the package logger level.
    """
    path = Path(config_file or os.environ.get(LOG_CONFIG_ENV) or DEFAULT_LOG_CONFIG)
    try:
        with open(path, 'r') as f:
            logging.config.dictConfig(yaml.safe_load(f))
    except (OSError, yaml.YAMLError, ValueError) as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logging.getLogger(__name__).warning(f"Falling back to basic logging, could not use {path}: {e}")

    level = level or os.environ.get(LOG_LEVEL_ENV)
    if level:
        numeric = logging.getLevelName(str(level).upper())
        if not isinstance(numeric, int):
            raise InvalidParameterError(f"Unknown log level: {level}")
        logging.getLogger("ssbnn").setLevel(numeric)
