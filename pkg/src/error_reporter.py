"""
Error taxonomy and failure reporting with structured logging and Sentry integration
Every CLI failure ends as exactly one machine-parseable stderr line
"""
import sys
import traceback
from typing import Any, Dict, Optional

from .unified_logging import get_logger, log_critical_error


class DinoError(Exception):
    """Base class for all library errors"""

    failure_type = 'UNKNOWN'
    exit_code = 1


class ConfigError(DinoError, ValueError):
    """Invalid configuration value or unusable geometry"""

    failure_type = 'CONFIG'
    exit_code = 2


class ParameterError(DinoError, ValueError):
    """Operation argument outside its documented range"""

    failure_type = 'PARAMETER'


class DimensionError(DinoError, ValueError):
    """Tensor shapes that cannot be combined"""

    failure_type = 'DIMENSION'


class ContractError(DinoError):
    """Precondition of an operation violated by the caller"""

    failure_type = 'CONTRACT'


class NumericError(DinoError, ArithmeticError):
    """Non-finite values where finite ones are required"""

    failure_type = 'NUMERIC'


class FormatError(DinoError):
    """Malformed DSV1 / DCK1 / PPM container"""

    failure_type = 'FORMAT'
    exit_code = 2

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


# Keyword fallback for exceptions raised outside the library
FAILURE_TYPES = {
    'IO': ['no such file', 'is a directory', 'permission denied', 'not found'],
    'MEMORY': ['unable to allocate', 'out of memory'],
    'NUMERIC': ['overflow', 'nan', 'divide by zero'],
}

_EXIT_CODES = {
    'IO': 2,
}


class ErrorReporter:
    """Reports errors with structured logging and external tracking"""

    @staticmethod
    def report_failure(command: str, error: BaseException, context: Optional[Dict[str, Any]] = None) -> int:
        """
        Report an error through the structured logger and Sentry, then emit
        the one-line stderr summary consumed by scripts wrapping the CLI

        Usage:
            try:
                run_training(config)
            except Exception as e:
                sys.exit(ErrorReporter.report_failure('train', e, {'config': path}))

        Returns:
            Process exit code for this failure
        """
        context = context or {}
        logger = get_logger(__name__)

        failure_type = get_failure_type(error)

        log_critical_error(
            logger,
            command,
            error,
            {
                'failure_type': failure_type,
                'context': {key: _format_value(value) for key, value in context.items()},
                'traceback': traceback.format_exc()
            }
        )

        code = exit_code_for(error)
        print(format_failure_line(command, error, failure_type, code), file=sys.stderr)
        return code

    @staticmethod
    def report_warning(command: str, message: str, context: Optional[Dict[str, Any]] = None):
        """Report non-critical warnings"""
        logger = get_logger(__name__)
        logger.warning(
            f"[{command}] {message}",
            extra={'command': command, 'context': context or {}}
        )


def get_failure_type(error: BaseException) -> str:
    """Determine failure type from error"""
    if isinstance(error, DinoError):
        return error.failure_type
    if isinstance(error, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return 'IO'

    error_msg = str(error).lower()
    for failure_type, keywords in FAILURE_TYPES.items():
        if any(keyword in error_msg for keyword in keywords):
            return failure_type

    return 'UNKNOWN'


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, DinoError):
        return error.exit_code
    return _EXIT_CODES.get(get_failure_type(error), 1)


def format_failure_line(command: str, error: BaseException, failure_type: str, code: int) -> str:
    """Single line, space separated key=value pairs; the message is quoted"""
    message = ' '.join(str(error).split()).replace('"', "'")
    line = f'DINO_FAILURE command={command} type={failure_type} exit={code} error="{message}"'
    offset = getattr(error, 'offset', None)
    if offset is not None:
        line += f' offset={offset}'
    return line


def _format_value(value: Any) -> str:
    """Format value for logging"""
    if isinstance(value, dict):
        return f"dict({len(value)} items)"
    elif isinstance(value, (list, tuple)):
        return f"list({len(value)} items)"
    elif isinstance(value, str) and len(value) > 80:
        return value[:80] + "..."
    else:
        return str(value)
