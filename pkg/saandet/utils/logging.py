from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Any, Mapping

import structlog
from structlog.processors import CallsiteParameter
from structlog.types import Processor

NOISY_LOGGERS = ("matplotlib", "PIL")


def _shared_processors() -> list[Processor]:
    return [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.stdlib.PositionalArgumentsFormatter(),
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.processors.UnicodeDecoder(),
        structlog.processors.CallsiteParameterAdder(
            [CallsiteParameter.FILENAME, CallsiteParameter.FUNC_NAME, CallsiteParameter.LINENO]
        ),
    ]


def _formatter(renderer: Processor, shared: list[Processor]) -> structlog.stdlib.ProcessorFormatter:
    return structlog.stdlib.ProcessorFormatter(
        foreign_pre_chain=shared,
        processors=[structlog.stdlib.ProcessorFormatter.remove_processors_meta, renderer],
    )


def _level(value: Any) -> int:
    level = logging.getLevelName(str(value).upper())
    return level if isinstance(level, int) else logging.INFO


def configure_logging(settings: Mapping[str, Any]) -> None:
    """
    Configure structlog and route the stdlib loggers (torch, matplotlib, PIL) through the same processor chain.

    ``LOGLEVEL`` sets the root level (default ``INFO``). Console output is coloured on a terminal and JSON lines
    otherwise. When ``LOGFILE`` is given, every record is also appended to that file as JSON, so a run directory
    keeps the log of the command that produced it.
    :return: None
    """
    shared = _shared_processors()
    structlog.configure(
        processors=shared + [structlog.stdlib.ProcessorFormatter.wrap_for_formatter],
        context_class=dict,
        wrapper_class=structlog.stdlib.BoundLogger,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )

    console: Processor = structlog.processors.JSONRenderer()
    if sys.stderr.isatty():
        console = structlog.dev.ConsoleRenderer()
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    handlers[0].setFormatter(_formatter(console, shared))
    logfile = settings.get("LOGFILE")
    if logfile:
        path = Path(logfile)
        path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(path, encoding="utf-8")
        file_handler.setFormatter(_formatter(structlog.processors.JSONRenderer(), shared))
        handlers.append(file_handler)

    root_logger = logging.getLogger()
    for h in list(root_logger.handlers):
        root_logger.removeHandler(h)
        if isinstance(h, logging.FileHandler):
            h.close()
    for h in handlers:
        root_logger.addHandler(h)

    level = _level(settings.get("LOGLEVEL", "INFO"))
    root_logger.setLevel(level)
    if level < logging.INFO:
        for name in NOISY_LOGGERS:
            logging.getLogger(name).setLevel(logging.INFO)
