"""
Logging setup for the milforge package.

Modules log through ``logging.getLogger(__name__)``; this module only
installs the handler once and resolves the level from ``MILFORGE_LOG``.
"""

import logging
import os
from typing import Optional, Union

ENV_VAR = "MILFORGE_LOG"
DEFAULT_LEVEL = logging.WARNING
LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"

_PACKAGE_LOGGER = __name__.rpartition(".")[0] or "milforge"
logger = logging.getLogger(__name__)


def resolve_level(level: Optional[Union[str, int]] = None) -> int:
    """
    Resolve a log level from an explicit value or the environment

    Args:
        level: level name or number; falls back to $MILFORGE_LOG

    Returns:
        Numeric logging level (WARNING when the name is not recognised)
    """
    if level is None:
        level = os.environ.get(ENV_VAR)
    if level is None or level == "":
        return DEFAULT_LEVEL
    if isinstance(level, int):
        return level
    resolved = logging.getLevelName(str(level).strip().upper())
    if isinstance(resolved, int):
        return resolved
    logger.warning(f"Unknown log level {level!r} in {ENV_VAR}, using WARNING")
    return DEFAULT_LEVEL


def configure_logging(level: Optional[Union[str, int]] = None) -> logging.Logger:
    """Attach one stream handler to the package logger and set its level"""
    package_logger = logging.getLogger(_PACKAGE_LOGGER)
    if not any(getattr(h, "_milforge", False) for h in package_logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._milforge = True
        package_logger.addHandler(handler)
    package_logger.setLevel(resolve_level(level))
    return package_logger
