"""
Logging configuration for phaseprof runs.

Features:
- Structured JSON file logs for machine parsing
- Coloured console output on stderr (stdout is left to command results)
- Size-based file rotation plus a separate error log
- Run-scoped context (command, seed, run_id) stamped on every record
- Stage tracking for long pipeline steps (collocation, training, evaluation)

Nothing is configured on import; the CLI calls ``init_logging`` once per
invocation.
"""

import json
import logging
import logging.handlers
import os
import sys
import time
import traceback
from contextvars import ContextVar
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv


DEFAULT_LOG_FILE = "phaseprof.log"
ERROR_LOG_FILE = "errors.log"

_RESERVED = frozenset({
    "name", "msg", "args", "created", "filename", "funcName",
    "levelname", "levelno", "lineno", "module", "msecs",
    "pathname", "process", "processName", "relativeCreated",
    "stack_info", "exc_info", "exc_text", "thread", "threadName",
    "message", "taskName",
})

# LogContext keys promoted to a top-level "run" object in JSON logs
RUN_KEYS = ("command", "run_id", "seed")


# ============================================
# FORMATTERS
# ============================================

class JSONFormatter(logging.Formatter):
    """One JSON object per record; ``extra={...}`` fields go under "extra"."""

    def __init__(self, include_extra: bool = True):
        super().__init__()
        self.include_extra = include_extra

    def format(self, record: logging.LogRecord) -> str:
        log_data: dict[str, Any] = {
            "timestamp": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        run = {key: getattr(record, key) for key in RUN_KEYS if hasattr(record, key)}
        if run:
            log_data["run"] = run

        if record.exc_info:
            log_data["exception"] = {
                "type": record.exc_info[0].__name__ if record.exc_info[0] else None,
                "message": str(record.exc_info[1]) if record.exc_info[1] else None,
                "traceback": traceback.format_exception(*record.exc_info) if record.exc_info[0] else None,
            }

        if self.include_extra:
            extra_fields = {}
            for key, value in record.__dict__.items():
                if key in _RESERVED or key in RUN_KEYS:
                    continue
                try:
                    json.dumps(value)
                    extra_fields[key] = value
                except (TypeError, ValueError):
                    extra_fields[key] = str(value)
            if extra_fields:
                log_data["extra"] = extra_fields

        return json.dumps(log_data, default=str)


class ConsoleFormatter(logging.Formatter):
    """Coloured single-line console format."""

    COLORS = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
    }
    RESET = "\033[0m"

    def __init__(self, use_color: bool = True):
        super().__init__()
        self.use_color = use_color

    def format(self, record: logging.LogRecord) -> str:
        color = self.COLORS.get(record.levelname, self.RESET) if self.use_color else ""
        reset = self.RESET if self.use_color else ""
        timestamp = datetime.fromtimestamp(record.created).strftime("%Y-%m-%d %H:%M:%S")
        command = getattr(record, "command", None)
        where = f"{command}:{record.name}" if command else record.name
        formatted = f"{color}{timestamp} | {record.levelname:8} | {where:36} | {record.getMessage()}{reset}"
        if record.exc_info:
            formatted += f"\n{color}{self.formatException(record.exc_info)}{reset}"
        return formatted


# ============================================
# LOGGING CONTEXT
# ============================================

_context: ContextVar[dict[str, Any]] = ContextVar("phaseprof_log_context", default={})


class LogContext:
    """
    Run-scoped context copied onto every log record.

    Backed by a ContextVar, so worker threads started with
    ``contextvars.copy_context()`` see the values of their parent.
    """

    @classmethod
    def set(cls, **kwargs: Any) -> None:
        _context.set({**_context.get(), **kwargs})

    @classmethod
    def get(cls, key: str, default: Any = None) -> Any:
        return _context.get().get(key, default)

    @classmethod
    def clear(cls) -> None:
        _context.set({})

    @classmethod
    def get_all(cls) -> dict[str, Any]:
        return dict(_context.get())


class ContextFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        for key, value in LogContext.get_all().items():
            setattr(record, key, value)
        return True


# ============================================
# LOGGER FACTORY
# ============================================

def setup_logging(
    level: str = "INFO",
    json_logs: bool = False,
    log_dir: Optional[Path] = None,
    log_file: Optional[str] = None,
    max_bytes: int = 10 * 1024 * 1024,
    backup_count: int = 5,
    enable_console: bool = True,
    enable_file: bool = True,
) -> logging.Logger:
    """
    Configure the root logger.

    Args:
        level: Log level name (DEBUG, INFO, WARNING, ERROR)
        json_logs: Use JSON format for the main file log
        log_dir: Directory for file logs (required when enable_file)
        log_file: Main log file name (default: phaseprof.log)
        max_bytes: Max log file size before rotation
        backup_count: Number of rotated files to keep
        enable_console: Log to stderr
        enable_file: Log to files under log_dir

    Returns:
        Configured root logger
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    context_filter = ContextFilter()

    if enable_console:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(ConsoleFormatter(use_color=sys.stderr.isatty()))
        console_handler.addFilter(context_filter)
        root_logger.addHandler(console_handler)

    if enable_file and log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)

        file_handler = logging.handlers.RotatingFileHandler(
            log_dir / (log_file or DEFAULT_LOG_FILE),
            maxBytes=max_bytes,
            backupCount=backup_count,
            encoding="utf-8",
        )
        if json_logs:
            file_handler.setFormatter(JSONFormatter())
        else:
            file_handler.setFormatter(logging.Formatter(
                "%(asctime)s | %(levelname)-8s | %(name)-28s | %(message)s"
            ))
        file_handler.addFilter(context_filter)
        root_logger.addHandler(file_handler)

        error_handler = logging.handlers.RotatingFileHandler(
            log_dir / ERROR_LOG_FILE,
            maxBytes=max_bytes,
            backupCount=backup_count,
            encoding="utf-8",
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(JSONFormatter())
        error_handler.addFilter(context_filter)
        root_logger.addHandler(error_handler)

    return root_logger


def init_logging(
    level: Optional[str] = None,
    json_logs: Optional[bool] = None,
    log_dir: Optional[Path] = None,
) -> logging.Logger:
    """
    Configure logging from arguments, falling back to LOG_LEVEL / JSON_LOGS
    (read through .env when present).
    """
    load_dotenv()
    if level is None:
        level = os.getenv("LOG_LEVEL", "INFO")
    if json_logs is None:
        json_logs = os.getenv("JSON_LOGS", "false").lower() == "true"
    return setup_logging(level=level, json_logs=json_logs, log_dir=log_dir, enable_file=log_dir is not None)


# ============================================
# PERFORMANCE LOGGING
# ============================================

def log_execution_time(logger: Optional[logging.Logger] = None):
    """
    Decorator logging wall time and outcome of a function.

    Usage:
        @log_execution_time()
        def summarize_patches(...):
            ...
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            _logger = logger or logging.getLogger(func.__module__)
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                _logger.error(
                    f"{func.__name__} failed: {e}",
                    extra={
                        "function": func.__name__,
                        "execution_time_seconds": round(time.perf_counter() - start_time, 3),
                        "status": "error",
                        "error_type": type(e).__name__,
                    },
                )
                raise
            _logger.info(
                f"{func.__name__} completed",
                extra={
                    "function": func.__name__,
                    "execution_time_seconds": round(time.perf_counter() - start_time, 3),
                    "status": "success",
                },
            )
            return result
        return wrapper
    return decorator


# ============================================
# STAGE LOGGER
# ============================================

class RunLogger:
    """
    Tracks one pipeline stage (collocate, train, evaluate, ...) and
    returns a summary dict on completion or failure.
    """

    def __init__(self, stage: str, logger: Optional[logging.Logger] = None):
        self.stage = stage
        self.logger = logger or logging.getLogger(f"phaseprof.{stage}")
        self.start_time: Optional[float] = None
        self.items_processed = 0
        self.warnings: list[str] = []

    def _elapsed(self) -> float:
        return round(time.perf_counter() - self.start_time, 3) if self.start_time else 0.0

    def start(self, **context: Any) -> None:
        self.start_time = time.perf_counter()
        LogContext.set(stage=self.stage)
        self.logger.info(f"Stage started: {self.stage}", extra={"phase": "start", **context})

    def progress(self, message: str, items: int = 0, **extra: Any) -> None:
        self.items_processed += items
        self.logger.info(message, extra={"phase": "progress", "items_processed": self.items_processed, **extra})

    def warn(self, message: str, **extra: Any) -> None:
        self.warnings.append(message)
        self.logger.warning(message, extra={"phase": "warning", **extra})

    def complete(self, **extra: Any) -> dict[str, Any]:
        summary = {
            "stage": self.stage,
            "status": "completed" if not self.warnings else "completed_with_warnings",
            "execution_time_seconds": self._elapsed(),
            "items_processed": self.items_processed,
            "warnings": list(self.warnings),
            **extra,
        }
        self.logger.info(f"Stage completed: {self.stage}", extra={"phase": "complete", **summary})
        return summary

    def fail(self, error: Exception, **extra: Any) -> dict[str, Any]:
        summary = {
            "stage": self.stage,
            "status": "failed",
            "execution_time_seconds": self._elapsed(),
            "items_processed": self.items_processed,
            "error": str(error),
            "error_type": type(error).__name__,
            **extra,
        }
        self.logger.error(f"Stage failed: {self.stage} - {error}", extra={"phase": "failed", **summary})
        return summary
