import logging
import os

LOG_LEVEL_ENV = "LESIONSEG_LOG_LEVEL"


def setup_logging(level: str | None = None):
    level = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%dT%H:%M:%S'
    )
    logging.getLogger().setLevel(getattr(logging, level, logging.INFO))
