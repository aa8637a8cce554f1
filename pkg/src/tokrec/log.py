"""Logging setup for tokrec."""

import logging
import os
import sys

LOG_ENV_VAR = "MOTOR_LOG"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_handler: logging.Handler | None = None


def _level_from_env() -> int:
    raw = os.environ.get(LOG_ENV_VAR, "").strip()
    if not raw:
        return logging.WARNING
    if raw.isdigit():
        return int(raw)
    level = logging.getLevelName(raw.upper())
    return level if isinstance(level, int) else logging.WARNING


def configure_logging(level: int | str | None = None) -> None:
    """
    Install a single stderr handler on the package logger.

    Args:
        level: Explicit level. Falls back to MOTOR_LOG, then WARNING.
    """
    global _handler

    if level is None:
        resolved = _level_from_env()
    elif isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            resolved = logging.WARNING
    else:
        resolved = level

    logger = logging.getLogger("tokrec")
    if _handler is None:
        _handler = logging.StreamHandler(sys.stderr)
        _handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(_handler)
    logger.setLevel(resolved)
