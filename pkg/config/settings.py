import os
from pydantic_settings import BaseSettings
from typing import Optional

class Settings(BaseSettings):
    # Storage
    DATA_DIR: str = os.getenv("DATA_DIR", "data")
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "runs")
    CONFIG_PATH: Optional[str] = os.getenv("CONFIG_PATH") or None

    # Compute
    DEVICE: str = os.getenv("DEVICE", "cpu")
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "0"))
    WORKERS: int = int(os.getenv("WORKERS", "1"))

    # Application
    DEBUG: bool = os.getenv("DEBUG", "false").lower() == "true"
    PORT: int = int(os.getenv("PORT", "5000"))

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_EVERY: int = int(os.getenv("LOG_EVERY", "50"))

    class Config:
        env_file = ".env"

settings = Settings()
