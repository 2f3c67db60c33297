"""Utility functions for logging and output files."""

from .file_system import atomic_write_frame, atomic_write_text, ensure_directory, remove_files
from .logging import get_logger, setup_logger

__all__ = ["atomic_write_frame", "atomic_write_text", "ensure_directory", "get_logger", "remove_files", "setup_logger"]
