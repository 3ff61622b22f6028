"""
Training guard
Rejects non-finite steps and watches for representation collapse
"""
import json
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

from .distill import StepMetrics
from .error_reporter import ErrorReporter, NumericError
from .unified_logging import get_logger


@dataclass
class GuardStatus:
    """Running collapse indicators for a training run"""
    low_kl_streak: int = 0
    collapse_warnings: int = 0
    last_kl: float = math.nan
    last_h: float = math.nan


class TrainingGuard:
    """
    Per-step checks applied by the engine after every train_step
    """

    def __init__(self,
                 out_dir: Optional[str] = None,
                 kl_threshold: float = 1e-3,
                 patience: int = 200):
        """
        Initialize training guard

        Args:
            out_dir: Directory for failure dumps, None to skip dumping
            kl_threshold: KL below which a step counts towards the collapse streak
            patience: Consecutive low-KL steps before a collapse warning
        """
        self.out_dir = out_dir
        self.kl_threshold = kl_threshold
        self.patience = patience
        self.status = GuardStatus()
        self.logger = get_logger(__name__)

    def check_step(self, metrics: StepMetrics) -> Tuple[bool, Optional[str]]:
        """
        Validate one step's metrics

        Raises:
            NumericError: any metric is NaN or infinite; the record is dumped first

        Returns:
            (collapsing, reason) - True once kl has stayed under the threshold for `patience` steps
        """
        record = metrics.to_record()
        bad = sorted(key for key, value in record.items() if not math.isfinite(value))
        if bad:
            dump_path = self.dump_failure(record)
            raise NumericError(
                f"non-finite {', '.join(bad)} at step {metrics.step}"
                + (f" (record written to {dump_path})" if dump_path else '')
            )

        self.status.last_kl = metrics.kl
        self.status.last_h = metrics.h
        if metrics.kl < self.kl_threshold:
            self.status.low_kl_streak += 1
        else:
            self.status.low_kl_streak = 0

        if self.status.low_kl_streak == self.patience:
            self.status.collapse_warnings += 1
            reason = (f"kl below {self.kl_threshold} for {self.patience} steps "
                      f"(h={metrics.h:.4f}), outputs look collapsed")
            ErrorReporter.report_warning('train', reason, {'step': metrics.step, 'kl': metrics.kl})
            return True, reason
        return self.status.low_kl_streak >= self.patience, None

    def dump_failure(self, record: Dict[str, Any]) -> Optional[str]:
        if not self.out_dir:
            return None
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, f"failure_step_{record['step']}.json")
        with open(path, 'w', encoding='utf-8') as handle:
            json.dump({key: _json_safe(value) for key, value in record.items()}, handle, indent=2, sort_keys=True)
        self.logger.error(f"Dumped failing step record to {path}", extra={'step': record['step']})
        return path


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value
