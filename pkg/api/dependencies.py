from pathlib import Path
from typing import Optional

from config.settings import settings
from schemas.models import RunConfig
from services.exceptions import InvalidConfig
from services.experiments import preset_config


def get_output_dir() -> Path:
    """Dependency to get the directory runs are written under"""
    return Path(settings.OUTPUT_DIR)


def get_data_dir() -> str:
    return settings.DATA_DIR


def get_run_config(preset: Optional[str] = None, config_path: Optional[str] = None) -> RunConfig:
    """Explicit config file, then CONFIG_PATH, then the named preset"""
    path = config_path or settings.CONFIG_PATH
    if path:
        try:
            return RunConfig.from_file(path)
        except (OSError, ValueError) as e:
            raise InvalidConfig(f"Cannot load run config {path}: {e}")
    return preset_config(preset or "desk")
