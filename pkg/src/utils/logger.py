"""Logging for the window-normalization laboratory.

One `winnorm` logger is shared by every component. Training runs wrap it in
a `RunLogger` so that interleaved grid cells stay attributable, and can tee
their records into a `train.log` inside the run directory.
"""

import logging
import sys
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Iterator, Optional, Union

from .config import settings

LOGGER_NAME = "winnorm"
CONSOLE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class ColoredFormatter(logging.Formatter):
    """Level names colored for an interactive console."""

    COLORS = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
    }
    RESET = "\033[0m"

    def format(self, record):
        # Copy so file handlers on the same logger see the plain level name
        record = logging.makeLogRecord(record.__dict__)
        color = self.COLORS.get(record.levelname, self.RESET)
        record.levelname = f"{color}{record.levelname}{self.RESET}"
        return super().format(record)


class RunLogger(logging.LoggerAdapter):
    """Prefixes every message with the run id, e.g. `[WIN-s3] Epoch 2/30 ...`."""

    def process(self, msg, kwargs):
        return f"[{self.extra['run_id']}] {msg}", kwargs


def _file_handler(path: Union[str, Path], level: int) -> logging.FileHandler:
    handler = logging.FileHandler(path)
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt=DATE_FORMAT))
    return handler


def setup_logger(
    name: str = LOGGER_NAME,
    level: Optional[str] = None,
    log_file: Optional[str] = None
) -> logging.Logger:
    """
    Configure the console handler and, if requested, a file handler.

    Args:
        name: Logger name
        level: Log level (defaults to settings.log_level)
        log_file: Optional log file path; outside local mode a timestamped
            file under settings.log_dir is used when none is given

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    log_level = getattr(logging, (level or settings.log_level).upper())
    logger.setLevel(log_level)
    logger.propagate = False
    logger.handlers = []

    # stderr keeps stdout free for the JSON that bench-windows prints
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    if settings.is_local_mode() and sys.stderr.isatty():
        console_handler.setFormatter(ColoredFormatter(CONSOLE_FORMAT, datefmt=DATE_FORMAT))
    else:
        console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(console_handler)

    if log_file or not settings.is_local_mode():
        if not log_file:
            log_dir = Path(settings.log_dir)
            log_dir.mkdir(parents=True, exist_ok=True)
            log_file = log_dir / f"winnorm_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        logger.addHandler(_file_handler(log_file, log_level))
        logger.info(f"Logging to file: {log_file}")

    return logger


def run_logger(run_id: str) -> RunLogger:
    return RunLogger(logging.getLogger(LOGGER_NAME), {"run_id": run_id})


@contextmanager
def run_log_file(directory: Union[str, Path]) -> Iterator[Path]:
    """Tee the shared logger into `<directory>/train.log` for the duration of a run."""
    path = Path(directory) / "train.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    base = logging.getLogger(LOGGER_NAME)
    handler = _file_handler(path, base.level)
    base.addHandler(handler)
    try:
        yield path
    finally:
        base.removeHandler(handler)
        handler.close()


# Create default logger
logger = setup_logger()
