from __future__ import annotations

import os
import tempfile
import time
from pathlib import Path
from typing import TYPE_CHECKING

from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from collections.abc import Iterable

    import pandas as pd
    from loguru import Logger

logger: Logger = get_logger(__name__)

FLOAT_FORMAT = "%.17g"


def ensure_directory(directory: Path) -> Path:
    """Creates ``directory`` (and its parents) when missing and returns it."""
    if not directory.is_dir():
        logger.debug(f"Creating output directory {directory}")
        directory.mkdir(parents=True, exist_ok=True)
    return directory


def atomic_write_text(path: Path, text: str) -> Path:
    """
    Writes ``text`` to a temporary file next to ``path`` and renames it into place, so a
    reader never observes a half-written output file.

    :param path: Destination file.
    :type path: Path
    :param text: File contents (UTF-8).
    :type text: str
    :return: The destination path.
    :rtype: Path
    :raises OSError: If the temporary file cannot be written or renamed.
    """
    ensure_directory(path.parent)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    tmp_path = Path(tmp_name)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        tmp_path.replace(path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote {path}")
    return path


def atomic_write_frame(path: Path, frame: pd.DataFrame) -> Path:
    """Atomically writes a data frame as CSV with round-trip (17 significant digit) floats."""
    return atomic_write_text(path, frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))


def remove_files(paths: Iterable[Path], retry_count: int = 3, retry_delay: float = 0.2) -> list[Path]:
    """
    Removes output files, retrying each a few times on transient OS errors. Paths that are
    already gone count as removed.

    :param paths: Files to remove.
    :type paths: Iterable[Path]
    :param retry_count: Attempts per file.
    :type retry_count: int
    :param retry_delay: Seconds between attempts.
    :type retry_delay: float
    :return: The files that could not be removed.
    :rtype: list[Path]
    """
    left_behind: list[Path] = []
    for path in paths:
        for attempt in range(1, retry_count + 1):
            try:
                path.unlink(missing_ok=True)
                logger.debug(f"Removed {path}")
                break
            except OSError as e:
                if attempt == retry_count:
                    logger.error(f"Could not remove {path} after {retry_count} attempts: {e}")
                    left_behind.append(path)
                else:
                    time.sleep(retry_delay)
    return left_behind
