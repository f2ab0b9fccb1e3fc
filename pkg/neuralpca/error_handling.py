"""
Error types and run-level error handling for Neural-PCA
Stage-tagged exceptions, severity classification, error logs and CLI exit codes
"""

import os
import json
import sys
import traceback
import functools
from typing import Dict, Any, Optional
from datetime import datetime
from enum import Enum


class ErrorSeverity(Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class NeuralPCAError(Exception):
    """Base exception tagged with the pipeline stage that raised it"""
    exit_code = 1

    def __init__(self, stage: str, message: str, severity: ErrorSeverity = ErrorSeverity.MEDIUM, context: Dict = None):
        self.stage = stage
        self.message = message
        self.severity = severity
        self.context = context or {}
        self.timestamp = datetime.now().isoformat()
        super().__init__(f"{stage}: {message}")


class ShapeError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('shape', message, ErrorSeverity.HIGH, context)


class NumericalError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('numerics', message, ErrorSeverity.HIGH, context)


class DecompositionError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('svd', message, ErrorSeverity.HIGH, context)


class DegenerateError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('degenerate', message, ErrorSeverity.MEDIUM, context)


class DegenerateReflectionError(DegenerateError):
    pass


class UsageError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('usage', message, ErrorSeverity.HIGH, context)


class FlowOverflowError(NeuralPCAError):
    def __init__(self, layer: str, message: str, context: Dict = None):
        self.layer = layer
        super().__init__('flow', f"{layer}: {message}", ErrorSeverity.HIGH, context)


class InsufficientBatchError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('pca_block', message, ErrorSeverity.HIGH, context)


class MissingStatisticsError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('pca_block', message, ErrorSeverity.HIGH, context)


class UnsolvableBoundError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('density', message, ErrorSeverity.MEDIUM, context)


class ModelNotFrozenError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('evaluation', message, ErrorSeverity.HIGH, context)


class DataFormatError(NeuralPCAError):
    def __init__(self, message: str, context: Dict = None):
        super().__init__('data', message, ErrorSeverity.HIGH, context)


class ConfigError(NeuralPCAError):
    exit_code = 2

    def __init__(self, message: str, context: Dict = None):
        super().__init__('config', message, ErrorSeverity.CRITICAL, context)


class CheckpointError(NeuralPCAError):
    exit_code = 3

    def __init__(self, message: str, context: Dict = None):
        super().__init__('checkpoint', message, ErrorSeverity.CRITICAL, context)


class NumericalAbortError(NeuralPCAError):
    exit_code = 4

    def __init__(self, message: str, context: Dict = None):
        super().__init__('training', message, ErrorSeverity.CRITICAL, context)


class RunErrorHandler:
    """Records errors raised during a run and maps them to exit codes"""

    def __init__(self, output_folder: Optional[str]):
        self.output_folder = output_folder
        self.error_log_path = os.path.join(output_folder, 'error_log.json') if output_folder else None
        self.errors = []

    def handle_stage_error(self, command: str, error: Exception) -> Dict[str, Any]:
        """Build an error record, persist it and decide the exit code"""
        severity = self._determine_error_severity(error)
        error_record = {
            'command': command,
            'stage': getattr(error, 'stage', 'unknown'),
            'error_type': self._classify_error_type(error),
            'error_class': error.__class__.__name__,
            'severity': severity.value,
            'message': str(error),
            'context': getattr(error, 'context', {}),
            'traceback': traceback.format_exc(),
            'timestamp': datetime.now().isoformat(),
            'exit_code': self.exit_code_for(error)
        }
        self.errors.append(error_record)
        self._save_error_log()
        return error_record

    def exit_code_for(self, error: Exception) -> int:
        if isinstance(error, NeuralPCAError):
            return error.exit_code
        if isinstance(error, (json.JSONDecodeError, KeyError)):
            return ConfigError.exit_code
        return 1

    def format_error_line(self, error_record: Dict[str, Any]) -> str:
        """Single machine-parsable line for stderr"""
        message = error_record['message'].replace('\n', ' ').replace('"', "'")
        return (f"error code={error_record['exit_code']} type={error_record['error_class']} "
                f"stage={error_record['stage']} message=\"{message}\"")

    def _determine_error_severity(self, error: Exception) -> ErrorSeverity:
        if isinstance(error, NeuralPCAError):
            return error.severity
        if isinstance(error, (MemoryError, KeyboardInterrupt)):
            return ErrorSeverity.CRITICAL
        if isinstance(error, (FileNotFoundError, PermissionError)):
            return ErrorSeverity.HIGH
        return ErrorSeverity.MEDIUM

    def _classify_error_type(self, error: Exception) -> str:
        error_type_map = {
            'ConfigError': 'config',
            'CheckpointError': 'checkpoint',
            'NumericalAbortError': 'numerical_abort',
            'DataFormatError': 'data_parsing',
            'FileNotFoundError': 'file_missing',
            'PermissionError': 'permission',
            'JSONDecodeError': 'data_parsing',
            'MemoryError': 'resource',
        }
        error_class = error.__class__.__name__
        if error_class in error_type_map:
            return error_type_map[error_class]
        if isinstance(error, NeuralPCAError):
            return error.stage
        return 'unknown'

    def _save_error_log(self):
        if not self.error_log_path:
            return
        try:
            os.makedirs(os.path.dirname(self.error_log_path), exist_ok=True)
            with open(self.error_log_path, 'w') as f:
                json.dump({
                    'errors': self.errors,
                    'total_errors': len(self.errors),
                    'last_updated': datetime.now().isoformat()
                }, f, indent=2, default=str)
        except OSError:
            pass


def handle_command_errors(command: str):
    """Decorator turning exceptions of a CLI command into an exit code"""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(args, *rest, **kwargs):
            try:
                func(args, *rest, **kwargs)
                return 0
            except Exception as e:
                output_folder = getattr(args, 'out', None)
                if output_folder and not os.path.isdir(output_folder):
                    output_folder = os.path.dirname(output_folder) or None
                handler = RunErrorHandler(output_folder)
                record = handler.handle_stage_error(command, e)
                print(handler.format_error_line(record), file=sys.stderr)
                return record['exit_code']
        return wrapper
    return decorator
