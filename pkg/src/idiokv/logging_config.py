"""Logging configuration for the library and CLI."""

import logging
import sys

from .config import get_settings

_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
_configured = False


def setup_logging(level: str | None = None) -> None:
    """Configure root logging once per process.

    Args:
        level: Explicit level name (e.g. from ``--log-level``); falls back to
            ``Settings.log_level`` when omitted
    """
    global _configured

    name = (level or get_settings().log_level).upper()
    log_level = getattr(logging, name, logging.INFO)

    if _configured:
        logging.getLogger().setLevel(log_level)
        return

    # stderr keeps stdout free for piped JSON
    logging.basicConfig(
        level=log_level,
        format=_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    # basicConfig is a no-op when the root logger already has handlers
    logging.getLogger().setLevel(log_level)

    for noisy in ("matplotlib", "hypothesis"):
        logging.getLogger(noisy).setLevel(logging.WARNING)

    _configured = True


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance.

    Args:
        name: Logger name (typically __name__)

    Returns:
        logging.Logger: Logger for the calling module
    """
    return logging.getLogger(name)
