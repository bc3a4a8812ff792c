import logging
import sys
from typing import Optional

from config.settings import settings

_configured = False

# Libraries whose INFO/DEBUG output drowns training progress
QUIET_LOGGERS = ("matplotlib", "numba", "PIL", "urllib3")


def setup_logging(level: Optional[str] = None):
    """Setup logging for the service and the CLI; later calls only adjust the level"""
    global _configured
    log_level = getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO)
    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    if _configured:
        for handler in root_logger.handlers:
            handler.setLevel(log_level)
        return

    formatter = logging.Formatter(
        fmt="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    )
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    console_handler.setLevel(log_level)
    root_logger.addHandler(console_handler)

    for logger_name in ("uvicorn", "uvicorn.access", "uvicorn.error", "fastapi", "httpx"):
        logging.getLogger(logger_name).setLevel(log_level)
    for logger_name in QUIET_LOGGERS:
        logging.getLogger(logger_name).setLevel(logging.WARNING)

    _configured = True
    logging.getLogger(__name__).debug(f"Logging configured at {logging.getLevelName(log_level)}")
