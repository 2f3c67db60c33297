"""Tests for logging setup."""

import warnings
from pathlib import Path

import pytest
from loguru import logger

from GFormulaLib.utils.logging import get_logger, setup_logger


@pytest.fixture(autouse=True)
def restore_warnings(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(warnings, "showwarning", warnings.showwarning)


def test_file_sink_receives_debug(tmp_path: Path) -> None:
    """Test the log file gets DEBUG output with the module name."""
    log_file = tmp_path / "gformula.log"
    setup_logger(log_file)
    get_logger("GFormulaLib.core.mle").debug("scoring step 3")
    logger.remove()
    text = log_file.read_text(encoding="utf-8")
    assert "scoring step 3" in text
    assert "DEBUG" in text


def test_console_level(capsys: pytest.CaptureFixture[str]) -> None:
    """Test DEBUG reaches the console only when verbose."""
    setup_logger(verbose=False)
    logger.debug("hidden")
    logger.info("shown")
    setup_logger(verbose=True)
    logger.debug("now visible")
    logger.remove()
    err = capsys.readouterr().err
    assert "hidden" not in err
    assert "shown" in err
    assert "now visible" in err


def test_quiet_console(capsys: pytest.CaptureFixture[str]) -> None:
    """Test quiet mode keeps only warnings on the console."""
    setup_logger(quiet=True)
    logger.info("progress")
    logger.warning("careful")
    logger.remove()
    err = capsys.readouterr().err
    assert "progress" not in err
    assert "careful" in err


def test_warnings_are_routed(tmp_path: Path) -> None:
    """Test warnings.warn output lands in the log."""
    log_file = tmp_path / "w.log"
    setup_logger(log_file)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.warn("overflow in exp", RuntimeWarning, stacklevel=1)
    logger.remove()
    assert "RuntimeWarning: overflow in exp" in log_file.read_text(encoding="utf-8")
