#!/usr/bin/env python3
"""
Server launcher: logging first, then uvicorn with settings from the environment.
"""

import logging
import sys
from typing import Optional

from config.settings import settings
from utils.logger import setup_logging

logger = logging.getLogger(__name__)


def main(port: Optional[int] = None, host: str = "0.0.0.0"):
    setup_logging()
    try:
        import uvicorn
        from main import app

        config = {
            "host": host,
            "port": port or settings.PORT,
            "workers": 1,
            "log_level": settings.LOG_LEVEL.lower(),
            "access_log": True,
            "use_colors": False,
        }
        logger.info(f"Starting server with config: {config}")
        uvicorn.run(app, **config)
    except Exception as e:
        logger.error(f"Startup failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
