"""
Logging Setup
Root logger configuration for the command line, and the JSON-lines metric log
"""

import logging
from typing import Optional

from pythonjsonlogger.json import JsonFormatter

from .exceptions import IoError

PLAIN_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
METRICS_LOGGER = "nsp.metrics"


def configure_logging(level: str = "INFO", json_lines: bool = False) -> None:
    """Configure the root logger once per process; later calls replace its handlers"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    if json_lines:
        handler.setFormatter(JsonFormatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    else:
        handler.setFormatter(logging.Formatter(PLAIN_FORMAT))
    root.addHandler(handler)
    root.setLevel(level.upper())


def attach_metrics_log(path: Optional[str]) -> Optional[logging.Handler]:
    """
    Write every record of the metric logger to `path` as one JSON object per line

    Returns:
        The handler, so the caller can detach and close it

    Raises:
        IoError: The file cannot be opened for writing
    """
    if not path:
        return None
    try:
        handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot open metrics log '{path}': {e}") from e
    handler.setFormatter(JsonFormatter("%(message)s"))
    metrics = logging.getLogger(METRICS_LOGGER)
    metrics.setLevel(logging.INFO)
    metrics.addHandler(handler)
    return handler


def detach_metrics_log(handler: Optional[logging.Handler]) -> None:
    if handler is None:
        return
    logging.getLogger(METRICS_LOGGER).removeHandler(handler)
    handler.close()
