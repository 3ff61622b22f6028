"""
Structured logging for training runs, evaluation commands and the CLI

Every record is one JSON object on stderr (stdout is reserved for command results),
optionally mirrored to a rotating file. Errors can be forwarded to Sentry.
"""
import logging
import logging.config
import os
import time
from datetime import datetime, timezone
from functools import wraps
from typing import Any, Dict, List, Optional, Union

import sentry_sdk
from pythonjsonlogger import jsonlogger
from sentry_sdk.integrations.logging import LoggingIntegration

# Fields copied from a record into the JSON payload when present
CONTEXT_FIELDS = ('run_id', 'command', 'epoch', 'step')

# Numerics run per step and per view; only the orchestration layers talk at INFO
MODULE_LOG_LEVELS = {
    'src.ndtensor': logging.WARNING,
    'src.resample': logging.WARNING,
    'src.vit': logging.WARNING,
    'src.head': logging.WARNING,
    'src.views': logging.WARNING,
    'src.distill': logging.INFO,
    'src.data': logging.INFO,
    'src.checkpoint': logging.INFO,
    'src.evaluation': logging.INFO,
    'src.training_guard': logging.INFO,
    'src.unified_engine': logging.INFO,
    'src.collapse_study': logging.INFO,
    'src.error_reporter': logging.INFO,
}

QUIET_LIBRARIES = ('sentry_sdk', 'urllib3')

LOG_FILE_BYTES = 10 * 1024 * 1024
LOG_FILE_BACKUPS = 3


class StructuredFormatter(jsonlogger.JsonFormatter):
    """JSON formatter stamping time, level, logger name and run context"""

    def add_fields(self, log_record, record, message_dict):
        super().add_fields(log_record, record, message_dict)
        log_record['timestamp'] = datetime.fromtimestamp(record.created, timezone.utc).isoformat()
        log_record['level'] = record.levelname
        log_record['logger'] = record.name
        for name in CONTEXT_FIELDS:
            value = getattr(record, name, None)
            if value is not None:
                log_record[name] = value
        if record.exc_info and 'exception' not in log_record:
            log_record['exception'] = self.formatException(record.exc_info)


class RunContextFilter(logging.Filter):
    """Sets default attributes on records that do not already carry them"""

    def __init__(self, run_id: Optional[str] = None, **fields: Any):
        super().__init__()
        self.run_id = run_id
        self.fields = dict(fields)
        if run_id is not None:
            self.fields.setdefault('run_id', run_id)

    def filter(self, record):
        for name, value in self.fields.items():
            if getattr(record, name, None) is None:
                setattr(record, name, value)
        return True


def init_sentry(dsn: Optional[str] = None, environment: str = 'research') -> bool:
    """Start Sentry when a DSN is available; returns whether it was started"""
    dsn = dsn or os.getenv('SENTRY_DSN')
    if not dsn:
        return False
    sentry_sdk.init(
        dsn=dsn,
        environment=environment,
        integrations=[LoggingIntegration(level=logging.INFO, event_level=logging.ERROR)],
        traces_sample_rate=0.0,
        attach_stacktrace=True,
        send_default_pii=False,
    )
    return True


def _handler_config(formatter: str, level: Union[int, str], **extra: Any) -> Dict[str, Any]:
    handler = {'formatter': formatter, 'level': level, 'filters': ['run_context']}
    handler.update(extra)
    return handler


def configure_logging(
    run_id: Optional[str] = None,
    log_level: Union[int, str] = logging.INFO,
    log_dir: Optional[str] = None,
    use_json: bool = True,
    sentry_dsn: Optional[str] = None
) -> logging.Logger:
    """
    Install the console handler (and the rotating file handler when log_dir is set)

    Args:
        run_id: Identifier stamped on every record
        log_level: Console level; the file always records DEBUG
        log_dir: Directory for dino_<date>.log, None for console only
        use_json: JSON records, or plain text lines when False
        sentry_dsn: Sentry DSN for error tracking

    Returns:
        The root logger
    """
    if sentry_dsn:
        init_sentry(sentry_dsn)

    formatter = 'json' if use_json else 'plain'
    handlers = {
        'console': _handler_config(formatter, log_level, **{
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
        }),
    }
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        stamp = datetime.now().strftime('%Y%m%d')
        handlers['file'] = _handler_config(formatter, logging.DEBUG, **{
            'class': 'logging.handlers.RotatingFileHandler',
            'filename': os.path.join(log_dir, f'dino_{stamp}.log'),
            'maxBytes': LOG_FILE_BYTES,
            'backupCount': LOG_FILE_BACKUPS,
        })

    logging.config.dictConfig({
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'json': {'()': StructuredFormatter, 'format': '%(level)s %(name)s %(message)s'},
            'plain': {'format': '%(asctime)s %(levelname)-7s %(name)s: %(message)s'},
        },
        'filters': {'run_context': {'()': RunContextFilter, 'run_id': run_id}},
        'handlers': handlers,
        'root': {'level': logging.DEBUG, 'handlers': list(handlers)},
    })

    for name, level in MODULE_LOG_LEVELS.items():
        logging.getLogger(name).setLevel(level)
    for name in QUIET_LIBRARIES:
        logging.getLogger(name).setLevel(logging.WARNING)
    return logging.getLogger()


def get_logger(name: str, run_id: Optional[str] = None) -> logging.Logger:
    """Module logger, tagged with run_id when one is given"""
    logger = logging.getLogger(name)
    if run_id is not None:
        tagged = any(isinstance(f, RunContextFilter) and f.run_id == run_id for f in logger.filters)
        if not tagged:
            logger.addFilter(RunContextFilter(run_id))
    return logger


class LogContext:
    """
    Adds fields (epoch, command, ...) to every record handled while the block is open

    The fields are attached through a filter on the root handlers, so records from any
    module inside the block carry them, not only those of the given logger.
    """

    def __init__(self, logger: logging.Logger, **fields: Any):
        self.logger = logger
        self.fields = fields
        self._filter = RunContextFilter(**fields)
        self._handlers: List[logging.Handler] = []

    def __enter__(self):
        self._handlers = list(logging.getLogger().handlers) + list(self.logger.handlers)
        for handler in self._handlers:
            handler.addFilter(self._filter)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        for handler in self._handlers:
            handler.removeFilter(self._filter)
        self._handlers = []


def log_performance(func):
    """Logs the wall time of each call at DEBUG"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        logger = logging.getLogger(func.__module__)
        start = time.perf_counter()
        status = 'error'
        try:
            result = func(*args, **kwargs)
            status = 'ok'
            return result
        finally:
            elapsed = time.perf_counter() - start
            logger.debug(f"{func.__name__} took {elapsed:.3f}s",
                         extra={'function': func.__name__, 'elapsed_seconds': elapsed, 'status': status})

    return wrapper


def log_critical_error(logger: logging.Logger, command: str, error: BaseException, context: Dict[str, Any]):
    """Logs a command failure with its traceback and forwards it to Sentry when initialized"""
    logger.error(
        f"{command} failed: {error}",
        extra={'command': command, 'error_type': type(error).__name__, 'context': context},
        exc_info=(type(error), error, error.__traceback__),
    )
    with sentry_sdk.push_scope() as scope:
        scope.set_tag('command', command)
        scope.set_context('failure', context)
        sentry_sdk.capture_exception(error)
