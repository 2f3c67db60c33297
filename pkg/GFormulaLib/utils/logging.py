from __future__ import annotations

import sys
import warnings
from typing import TYPE_CHECKING, Any

from loguru import logger

if TYPE_CHECKING:
    from pathlib import Path

    from loguru import Logger

DETAILED_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
SIMPLE_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <level>{message}</level>"


def setup_logger(log_file: Path | None = None, verbose: bool = False, quiet: bool = False) -> Logger:
    """
    Resets loguru and installs the console sink plus an optional rotating file sink.
    The console shows INFO and above in a compact format, or DEBUG with module and line
    information when ``verbose`` is set. ``quiet`` restricts the console to warnings, which
    keeps progress bars readable during long simulation studies.

    :param log_file: Optional path of the log file. The file always receives DEBUG output
                     and is rotated at 10 MB, kept for 7 days and compressed.
    :type log_file: Path | None
    :param verbose: Enables DEBUG output and the detailed format on the console.
    :type verbose: bool
    :param quiet: Only WARNING and above reach the console. Ignored when ``verbose`` is set.
    :type quiet: bool
    :return: The configured loguru logger.
    :rtype: Logger
    """
    logger.remove()

    console_level = "DEBUG" if verbose else ("WARNING" if quiet else "INFO")
    logger.add(
        sys.stderr,
        format=DETAILED_FORMAT if verbose else SIMPLE_FORMAT,
        level=console_level,
        colorize=True,
    )

    if log_file:
        logger.add(
            log_file,
            format=DETAILED_FORMAT,
            level="DEBUG",
            rotation="10 MB",
            retention="7 days",
            compression="zip",
        )

    capture_warnings()
    return logger


def capture_warnings() -> None:
    """Route ``warnings.warn`` output (numpy/scipy runtime warnings included) through loguru."""

    def _showwarning(message: Warning | str, category: type[Warning], filename: str, lineno: int, *_: Any, **__: Any) -> None:
        logger.bind(name="warnings").warning(f"{category.__name__}: {message} ({filename}:{lineno})")

    warnings.showwarning = _showwarning


def get_logger(name: str) -> Logger:
    return logger.bind(name=name)
