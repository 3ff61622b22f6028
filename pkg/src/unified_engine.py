"""
Distillation training engine
Drives epochs of train_step with per-step schedules, evaluation snapshots, checkpoints and metric logs
"""
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np

from . import ndtensor as nd
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, batches, load_dataset, num_batches
from .distill import DistillState, StepMetrics, train_step
from .error_reporter import ConfigError, ContractError
from .evaluation import extract_features, knn_eval
from .metrics_log import MetricsWriter
from .model import DinoModel
from .optimizer import AdamW
from .run_config import RunConfig, dump_run_config, parse_run_config
from .schedules import build_schedules
from .training_guard import TrainingGuard
from .unified_logging import LogContext, get_logger

METRICS_FILE = 'metrics.jsonl'
EVAL_FILE = 'eval.jsonl'
FINAL_CHECKPOINT = 'final.dck'


@dataclass
class EvalSnapshot:
    """Teacher and student k-NN accuracy at one point of training"""
    step: int
    epoch: int
    teacher_knn: float
    student_knn: float

    def to_record(self) -> Dict[str, Any]:
        return {'step': self.step, 'epoch': self.epoch,
                'teacher_knn': self.teacher_knn, 'student_knn': self.student_knn}


@dataclass
class TrainingResult:
    checkpoint_path: str
    metrics_path: str
    eval_path: str
    steps_run: int
    last_metrics: Optional[StepMetrics] = None
    snapshots: List[EvalSnapshot] = field(default_factory=list)
    collapse_warnings: int = 0


class DistillationEngine:
    """
    Owns the student, the distillation state and the optimizer for one run
    """

    def __init__(self,
                 config: RunConfig,
                 run_id: str = 'dino',
                 train_dataset: Optional[Dataset] = None,
                 test_dataset: Optional[Dataset] = None):
        """
        Initialize distillation engine

        Args:
            config: Full run configuration
            run_id: Identifier stamped on log records
            train_dataset: Overrides data.train_path when given
            test_dataset: Overrides data.test_path when given; None disables evaluation
        """
        self.config = config
        self.run_id = run_id
        self.logger = get_logger(__name__, run_id)
        self.out_dir = config.train.out_dir

        nd.set_precision(config.train.precision)

        self.train_data = train_dataset if train_dataset is not None else load_dataset(config.data.train_path)
        if test_dataset is None and config.data.test_path:
            test_dataset = load_dataset(config.data.test_path, split='test')
        self.test_data = test_dataset
        if len(self.train_data) == 0:
            raise ConfigError("training dataset is empty")
        self._check_image_size()

        self.model = DinoModel.create(config.model, config.head, config.train.seed)
        self.state = DistillState.initialize(self.model.params, config.head.out_dim)
        self.optimizer = AdamW(self.model.params, config.optim)
        self.guard = TrainingGuard(self.out_dir, config.train.collapse_kl_threshold,
                                   config.train.collapse_patience)

        self.steps_per_epoch = num_batches(len(self.train_data), config.train.batch_size)
        self.schedules = build_schedules(config, self.steps_per_epoch)
        self.snapshots: List[EvalSnapshot] = []

        self.logger.info(
            f"[{run_id}] Engine initialized: {len(self.train_data)} images, "
            f"{self.steps_per_epoch} steps/epoch, {self.total_steps} steps",
            extra={'teacher_norm': config.distill.teacher_norm, 'teacher_mode': config.distill.teacher_mode},
        )

    @property
    def total_steps(self) -> int:
        return self.schedules.total_steps

    def _check_image_size(self) -> None:
        _, h, w = self.train_data.image_shape
        self.config.model.grid_for(h, w)
        if self.train_data.image_shape[0] != self.config.model.in_chans:
            raise ConfigError(
                f"dataset has {self.train_data.image_shape[0]} channels, model.in_chans={self.config.model.in_chans}"
            )

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def make_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config_text=dump_run_config(self.config),
            step=self.state.step,
            epoch=self.state.epoch,
            student=self.model.params,
            teacher=self.state.teacher,
            center=self.state.center,
            optimizer=self.optimizer.state_dict(),
            rng_key=(self.config.train.seed, self.state.step),
            extras={'guard_streak': np.array([self.guard.status.low_kl_streak], dtype=np.int64)},
        )

    def save(self, name: str) -> str:
        return save_checkpoint(self.make_checkpoint(), os.path.join(self.out_dir, name))

    def restore(self, checkpoint: Checkpoint) -> None:
        """Continue from a checkpoint written by a run with the same settings"""
        saved = parse_run_config(checkpoint.config_text)
        if _without_out_dir(saved) != _without_out_dir(self.config):
            raise ConfigError("checkpoint was written with a different run configuration")

        checkpoint.student.check_compatible(self.model.params)
        checkpoint.teacher.check_compatible(self.model.params)
        if checkpoint.center.shape != self.state.center.shape:
            raise ContractError(f"checkpoint center has shape {checkpoint.center.shape}")

        self.model.params = checkpoint.student
        self.state = DistillState(checkpoint.teacher, checkpoint.center, checkpoint.step, checkpoint.epoch)
        self.optimizer.load_state_dict(checkpoint.optimizer)
        streak = checkpoint.extras.get('guard_streak')
        self.guard.status.low_kl_streak = int(streak[0]) if streak is not None else 0
        self.logger.info(f"[{self.run_id}] Resumed at step {checkpoint.step}", extra={'step': checkpoint.step})

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------

    def evaluate(self) -> Optional[EvalSnapshot]:
        """k-NN accuracy of teacher and student backbones on the held-out split"""
        if self.test_data is None:
            return None
        cfg = self.config.train
        bank_data = self.train_data
        if cfg.eval_train_samples and cfg.eval_train_samples < len(bank_data):
            bank_data = bank_data.subset(np.arange(cfg.eval_train_samples))
        k = min(cfg.eval_k, len(bank_data))

        accuracies = {}
        for role, params in (('teacher', self.state.teacher), ('student', self.model.params)):
            train_bank = extract_features(self.model, bank_data, cfg.eval_layers, params, source=role)
            test_bank = extract_features(self.model, self.test_data, cfg.eval_layers, params, source=role)
            accuracies[role] = knn_eval(train_bank, test_bank, k, cfg.eval_tau)

        snapshot = EvalSnapshot(self.state.step, self.state.epoch, accuracies['teacher'], accuracies['student'])
        self.logger.info(
            f"[{self.run_id}] k-NN teacher={snapshot.teacher_knn:.4f} student={snapshot.student_knn:.4f}",
            extra={'step': snapshot.step, 'epoch': snapshot.epoch},
        )
        return snapshot

    # ------------------------------------------------------------------
    # Training loop
    # ------------------------------------------------------------------

    def train(self, stop_after: Optional[int] = None) -> TrainingResult:
        """
        Run until the schedule ends, or until `stop_after` total steps have run

        A stopped run leaves a checkpoint named step_<n>.dck that continues it.
        """
        cfg = self.config.train
        metrics_path = os.path.join(self.out_dir, METRICS_FILE)
        eval_path = os.path.join(self.out_dir, EVAL_FILE)
        # step records are indexed from 0, snapshots by completed steps
        metrics_log = MetricsWriter(metrics_path, keep_through_step=self.state.step - 1)
        eval_log = MetricsWriter(eval_path, keep_through_step=self.state.step)

        end = self.total_steps if stop_after is None else min(self.total_steps, stop_after)
        start = self.state.step
        last: Optional[StepMetrics] = None

        while self.state.step < end:
            epoch, offset = divmod(self.state.step, self.steps_per_epoch)
            with LogContext(self.logger, run_id=self.run_id, epoch=epoch):
                for batch in batches(self.train_data, cfg.batch_size, cfg.seed, epoch, start=offset):
                    hyper = self.schedules.at(self.state.step)
                    last = train_step(batch.images, batch.indices, self.model, self.state,
                                      self.config.distill, self.config.views, self.optimizer,
                                      hyper, cfg.seed, epoch)
                    self.guard.check_step(last)
                    metrics_log.write(last.to_record())
                    if self.state.step >= end:
                        break

            if self.state.step % self.steps_per_epoch == 0:
                self._end_of_epoch(self.state.step // self.steps_per_epoch, eval_log)

        if self.state.step >= self.total_steps:
            checkpoint_path = self.save(FINAL_CHECKPOINT)
        else:
            checkpoint_path = self.save(f'step_{self.state.step}.dck')

        return TrainingResult(checkpoint_path, metrics_path, eval_path, self.state.step - start, last,
                              list(self.snapshots), self.guard.status.collapse_warnings)

    def _end_of_epoch(self, epochs_done: int, eval_log: MetricsWriter) -> None:
        cfg = self.config.train
        self.logger.info(f"[{self.run_id}] Epoch {epochs_done} complete", extra={'step': self.state.step})
        if cfg.eval_every and epochs_done % cfg.eval_every == 0:
            snapshot = self.evaluate()
            if snapshot is not None:
                self.snapshots.append(snapshot)
                eval_log.write(snapshot.to_record())
        if cfg.checkpoint_every and epochs_done % cfg.checkpoint_every == 0 and self.state.step < self.total_steps:
            self.save(f'epoch_{epochs_done}.dck')


def _without_out_dir(config: RunConfig) -> RunConfig:
    return config.replace(train=replace(config.train, out_dir=''))


def run_training(config: RunConfig, resume_from: Optional[str] = None, run_id: str = 'dino',
                 stop_after: Optional[int] = None, train_dataset: Optional[Dataset] = None,
                 test_dataset: Optional[Dataset] = None) -> TrainingResult:
    """
    Train from scratch, or continue the run saved in `resume_from`

    Usage:
        result = run_training(load_run_config('configs/vit_toy.conf'))
    """
    engine = DistillationEngine(config, run_id, train_dataset, test_dataset)
    if resume_from:
        engine.restore(load_checkpoint(resume_from))
    return engine.train(stop_after)
