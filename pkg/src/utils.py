import logging
from typing import Iterable, Optional

from src.config import Config

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None, quiet: bool = False):
    """Configure logging for the simulator

    Args:
        level: Logging level name (defaults to Config.LOG_LEVEL)
        log_file: Log file path; empty string disables the file handler
        quiet: Restrict console output to warnings and errors

    Returns:
        The package logger
    """
    level_name = (level or Config.LOG_LEVEL).upper()
    log_file = Config.LOG_FILE if log_file is None else log_file

    console = logging.StreamHandler()
    if quiet:
        console.setLevel(logging.WARNING)
    handlers = [console]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=Config.LOG_FORMAT,
        handlers=handlers,
        force=True
    )
    return logging.getLogger('src')


def format_float(value: float) -> str:
    """Shortest round-trip text for a float (deterministic across runs)"""
    return repr(float(value))


def format_row(values: Iterable[float]) -> str:
    return ','.join(format_float(v) for v in values)
