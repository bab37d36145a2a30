"""
Runtime settings loaded from defaults, environment variables and an optional
JSON config file.
"""

import os
import json
import logging
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

load_dotenv()

logger = logging.getLogger(__name__)

CONFIG_DIR = Path("config")
CONFIG_FILE = CONFIG_DIR / "rjar_config.json"

DEFAULT_MATERIALIZE_THRESHOLD = 4096
DEFAULT_GAMMA_FLOOR = 1.0
DEFAULT_C_BCCH = 1.1

ENV_KEYS = {
    "output_dir": "RJAR_OUTPUT_DIR",
    "materialize_threshold": "RJAR_MATERIALIZE_THRESHOLD",
    "threads": "RJAR_THREADS",
    "log_level": "RJAR_LOG_LEVEL",
    "gamma_floor": "RJAR_GAMMA_FLOOR",
    "c_bcch": "RJAR_C_BCCH",
}


class Settings(BaseModel):
    """Resolved runtime settings."""

    output_dir: Path = Path(".")
    materialize_threshold: int = Field(DEFAULT_MATERIALIZE_THRESHOLD, ge=2)
    threads: Optional[int] = Field(None, ge=1)
    log_level: str = "INFO"
    gamma_floor: float = Field(DEFAULT_GAMMA_FLOOR, gt=0)
    c_bcch: float = Field(DEFAULT_C_BCCH, gt=1)

    @field_validator("log_level")
    @classmethod
    def _upper_level(cls, value: str) -> str:
        value = value.upper()
        if value not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {value}")
        return value

    def resolved_threads(self) -> int:
        return self.threads or os.cpu_count() or 1


def _merge(config: dict, updates: dict, source: str) -> dict:
    """Apply updates one key at a time, dropping values that fail validation."""
    for key, value in updates.items():
        if key not in Settings.model_fields:
            logger.warning(f"Ignoring unknown setting '{key}' from {source}")
            continue
        candidate = {**config, key: value}
        try:
            Settings(**candidate)
        except ValidationError as e:
            logger.warning(
                f"Invalid value for '{key}' from {source}: {value!r} "
                f"({e.errors()[0]['msg']}), keeping {config.get(key)!r}"
            )
            continue
        config = candidate
    return config


def load_settings() -> Settings:
    """Load settings from environment variables, then the config file."""
    config = Settings().model_dump()

    env_values = {
        key: os.getenv(env_name)
        for key, env_name in ENV_KEYS.items()
        if os.getenv(env_name) not in (None, "")
    }
    config = _merge(config, env_values, "environment")

    if CONFIG_FILE.exists():
        try:
            with open(CONFIG_FILE, "r") as f:
                file_config = json.load(f)
            config = _merge(config, file_config, str(CONFIG_FILE))
            logger.info("Loaded settings from config file")
        except Exception as e:
            logger.warning(f"Error loading config file: {e}, using defaults")

    return Settings(**config)
