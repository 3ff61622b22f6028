"""
Collapse study
Trains with centering or sharpening switched off and records entropy / KL curves
"""
import csv
import math
import os
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import Dataset, load_dataset, num_batches
from .distill import DistillConfig
from .error_reporter import ParameterError
from .metrics_log import read_records
from .run_config import RunConfig
from .unified_engine import DistillationEngine
from .unified_logging import get_logger

logger = get_logger(__name__)

CSV_COLUMNS = ('step', 'h', 'kl', 'ce')

# The unsharpened arm keeps centering but sets the teacher temperature to 1
COLLAPSE_MODES: Dict[str, Callable[[DistillConfig], DistillConfig]] = {
    'no-center': lambda d: replace(d, teacher_norm='none'),
    'no-sharpen': lambda d: replace(d, teacher_norm='centering', teacher_temp=1.0, teacher_temp_final=1.0),
    'both': lambda d: replace(d, teacher_norm='centering'),
}


@dataclass(frozen=True)
class CollapseSummary:
    mode: str
    steps: int
    final_h: float
    final_kl: float
    late_kl: float
    late_kl_min: float
    log_k: float
    csv_path: str

    @property
    def uniform_gap(self) -> float:
        """Relative distance of the final entropy from ln K"""
        return abs(self.final_h - self.log_k) / self.log_k


def study_config(config: RunConfig, mode: str, steps: int, n_train: int, out_dir: str) -> RunConfig:
    """Config for one arm: enough epochs to cover `steps`, no evaluation, no periodic checkpoints"""
    if mode not in COLLAPSE_MODES:
        raise ParameterError(f"collapse mode must be one of {tuple(COLLAPSE_MODES)}, got {mode!r}")
    if steps < 1:
        raise ParameterError(f"collapse study needs at least 1 step, got {steps}")
    epochs = math.ceil(steps / num_batches(n_train, config.train.batch_size))
    train = replace(config.train, epochs=epochs, eval_every=0, checkpoint_every=0, out_dir=out_dir)
    return config.replace(distill=COLLAPSE_MODES[mode](config.distill), train=train)


def write_curve(records: List[Dict[str, float]], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for record in records:
            writer.writerow([record['step']] + [repr(float(record[c])) for c in CSV_COLUMNS[1:]])


def run_collapse_study(config: RunConfig, mode: str, steps: int = 2000,
                       train_dataset: Optional[Dataset] = None,
                       out_dir: Optional[str] = None,
                       tail_fraction: float = 0.1) -> CollapseSummary:
    """
    Train one arm of the study for `steps` steps and write its curve as CSV

    Args:
        config: Base run configuration; its distill section is modified per mode
        mode: 'no-center', 'no-sharpen' or 'both'
        steps: Number of optimizer steps
        train_dataset: Overrides data.train_path
        out_dir: Run directory, default <train.out_dir>/collapse_<mode>
        tail_fraction: Share of final steps averaged into final_h and final_kl

    Returns:
        CollapseSummary with the final entropy, final KL and the KL mean over the second half
    """
    out_dir = out_dir or os.path.join(config.train.out_dir, f'collapse_{mode}')
    data = train_dataset if train_dataset is not None else load_dataset(config.data.train_path)

    arm = study_config(config.replace(data=replace(config.data, test_path='')), mode, steps, len(data), out_dir)
    engine = DistillationEngine(arm, run_id=f'collapse-{mode}', train_dataset=data)
    result = engine.train(stop_after=steps)

    records = read_records(result.metrics_path)
    csv_path = os.path.join(out_dir, f'collapse_{mode}.csv')
    write_curve(records, csv_path)

    h = np.array([r['h'] for r in records])
    kl = np.array([r['kl'] for r in records])
    tail = max(1, int(round(len(records) * tail_fraction)))
    summary = CollapseSummary(
        mode=mode, steps=len(records),
        final_h=float(h[-tail:].mean()), final_kl=float(kl[-tail:].mean()),
        late_kl=float(kl[len(kl) // 2:].mean()), late_kl_min=float(kl[len(kl) // 2:].min()),
        log_k=math.log(config.head.out_dim), csv_path=csv_path,
    )
    logger.info(
        f"Collapse study {mode}: h={summary.final_h:.4f} (ln K={summary.log_k:.4f}) kl={summary.final_kl:.5f}",
        extra={'mode': mode, 'steps': summary.steps},
    )
    return summary
