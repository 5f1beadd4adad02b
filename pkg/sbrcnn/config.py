"""
Process-level settings for SBR-CNN
"""
import copy
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from sbrcnn.exceptions import ConfigError
from sbrcnn.schemas import ExperimentConfig


class Settings(BaseSettings):
    """Runtime settings loaded from environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="SBRCNN_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    app_name: str = "sbrcnn"
    app_version: str = "1.0.0"

    # Logging
    log_level: str = "INFO"
    log_json: bool = False

    # Compute
    device: str = "cpu"
    deterministic: bool = True
    num_threads: int = 0  # 0 leaves torch's default

    # Artifacts
    runs_root: Path = Path("./runs")


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


# Experiment documents
def parse_override(item: str) -> Tuple[List[str], Any]:
    """
    Split ``section.key=value`` into a key path and a value

    Values are read as JSON when they parse and kept as plain strings otherwise.
    """
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    key = key.strip().lstrip("-")
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Set dotted keys inside a raw config document, creating sections as needed"""
    document = copy.deepcopy(document)
    for item in overrides:
        path, value = parse_override(item)
        node = document
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{'.'.join(path)}: '{part}' is not a section")
            node = child
        node[path[-1]] = value
    return document


def _error_path(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error.get("loc", ())) or "config"


def validate_experiment(document: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a raw document

    Raises:
        ConfigError: Naming the dotted key of the first problems found
    """
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        details = "; ".join(f"{_error_path(err)}: {err['msg']}" for err in e.errors()[:5])
        raise ConfigError(f"invalid config: {details}") from e


def load_experiment_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Read a JSON experiment config and apply CLI overrides

    Args:
        path: Config file; None starts from the defaults
        overrides: ``section.key=value`` strings, applied in order

    Returns:
        Validated ExperimentConfig
    """
    document: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return validate_experiment(apply_overrides(document, overrides))
