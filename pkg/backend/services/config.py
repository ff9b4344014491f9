"""
Engine configuration
Defaults live on the Settings model; environment variables (optionally from
a .env file) override them, and a JSON config file overrides both.
"""

import json
import logging
import os
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError as PydanticValidationError

from .errors import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseModel):
    """Engine constants. C_* values come from the calibration runs."""

    resolution: int = Field(16, ge=4)  # cells per unit length
    min_resolution: int = 4
    epsilon: float = Field(0.25, gt=0, le=1)

    # alpha = C_alpha * eps^(1/gamma), beta = 1 + C_beta * ((1+eps)^(2/d) - 1)
    # worst case over the built-in dictionary (tensor-cosine binds)
    C_alpha: float = Field(0.125, gt=0)
    C_beta: float = Field(0.125, gt=0)

    # distance bound constants, per condition
    C_tvc: float = Field(8.0, gt=0)
    C_ahc: float = Field(64.0, gt=0)
    bound_safety: float = Field(1.25, ge=1.0)

    fft_crossover: int = Field(64, ge=1)
    max_net_entries: int = Field(5_000_000, ge=1)
    two_sided: bool = False

    jobs: int = Field(1, ge=1)
    delta_grid: List[float] = Field(default_factory=lambda: [0.1, 0.05, 0.01])
    bootstrap_reps: int = Field(200, ge=0)


def _env_overrides() -> dict:
    overrides = {}
    jobs = os.getenv("MSS_JOBS")
    if jobs:
        try:
            overrides["jobs"] = int(jobs)
        except ValueError:
            raise ConfigError(f"MSS_JOBS must be an integer, got '{jobs}'")
    resolution = os.getenv("MSS_RESOLUTION")
    if resolution:
        try:
            overrides["resolution"] = int(resolution)
        except ValueError:
            raise ConfigError(f"MSS_RESOLUTION must be an integer, got '{resolution}'")
    return overrides


def read_config_file(path: Optional[str]) -> dict:
    """Load a JSON config file; returns {} when no path is given."""
    if not path:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(config_path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def load_settings(config_path: Optional[str] = None, **overrides) -> Settings:
    """
    Build Settings from defaults, environment and an optional JSON file.

    Args:
        config_path: JSON file; its "settings" section (or the whole object
            when there is no such key) overrides the defaults
        overrides: final keyword overrides (e.g. from CLI flags); None values
            are ignored

    Returns:
        Validated Settings
    """
    load_dotenv()

    values = _env_overrides()
    data = read_config_file(config_path)
    values.update(data.get("settings", {}) if "settings" in data else {
        k: v for k, v in data.items() if k in Settings.model_fields
    })
    values.update({k: v for k, v in overrides.items() if v is not None})

    try:
        settings = Settings(**values)
    except PydanticValidationError as e:
        raise ConfigError(f"Invalid settings: {e}")

    if settings.resolution < settings.min_resolution:
        raise ConfigError(
            f"resolution {settings.resolution} is below the minimum {settings.min_resolution}"
        )
    logger.debug(f"Loaded settings: {settings.model_dump()}")
    return settings
