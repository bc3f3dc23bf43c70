"""Logging setup: JSON lines by default, plain text on request."""

from __future__ import annotations

import logging
import sys

from pythonjsonlogger.json import JsonFormatter

_JSON_FIELDS = "%(asctime)s %(levelname)s %(name)s %(message)s"
_TEXT_FIELDS = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
_RENAME = {"asctime": "ts", "levelname": "level", "name": "logger", "message": "msg"}


def configure_logging(level: str | int = "INFO", fmt: str = "json") -> logging.Handler:
    """Install a single stderr handler on the root logger.

    Args:
        level: logging level name or number
        fmt: "json" for structured lines, "text" for human-readable lines

    Returns:
        The installed handler
    """
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(JsonFormatter(_JSON_FIELDS, rename_fields=_RENAME))
    elif fmt == "text":
        handler.setFormatter(logging.Formatter(_TEXT_FIELDS))
    else:
        raise ValueError(f"unknown log format: {fmt}")

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level.upper() if isinstance(level, str) else level)
    # matplotlib's font manager is chatty at DEBUG
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    return handler
