"""
Per-step hyperparameter schedules: learning rate, weight decay, teacher momentum, teacher temperature
"""
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict

from .error_reporter import ConfigError, ParameterError

if TYPE_CHECKING:
    from .run_config import RunConfig

SCHEDULE_KINDS = ('cosine', 'linear', 'constant')


@dataclass(frozen=True)
class ScheduleSpec:
    """
    Linear ramp from `start` to `base` over `warmup_steps`, then the `kind`
    curve from `base` to `final` over the remaining steps
    """
    kind: str
    base: float
    final: float
    total_steps: int
    warmup_steps: int = 0
    start: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}, expected one of {SCHEDULE_KINDS}")
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"schedule needs 0 <= warmup ({self.warmup_steps}) <= total ({self.total_steps})"
            )
        if not all(math.isfinite(v) for v in (self.base, self.final, self.start)):
            raise ConfigError("schedule values must be finite")


def schedule_value(spec: ScheduleSpec, step: int) -> float:
    if not 0 <= step <= spec.total_steps:
        raise ParameterError(f"step {step} outside schedule range [0, {spec.total_steps}]")

    if step < spec.warmup_steps:
        return spec.start + (spec.base - spec.start) * step / spec.warmup_steps

    if spec.kind == 'constant':
        return spec.base

    span = spec.total_steps - spec.warmup_steps
    progress = 1.0 if span == 0 else (step - spec.warmup_steps) / span
    if spec.kind == 'linear':
        return spec.base + (spec.final - spec.base) * progress
    return spec.final + (spec.base - spec.final) * (1.0 + math.cos(math.pi * progress)) / 2.0


def scaled_lr(base_per_256: float, batch_size: int) -> float:
    """Linear scaling rule: lr = base * batch_size / 256"""
    if batch_size < 1:
        raise ParameterError(f"batch size must be >= 1, got {batch_size}")
    return base_per_256 * batch_size / 256.0


@dataclass(frozen=True)
class StepHyperparams:
    step: int
    lr: float
    weight_decay: float
    momentum: float
    teacher_temp: float

    def as_dict(self) -> Dict[str, float]:
        return {'lr': self.lr, 'wd': self.weight_decay, 'lambda': self.momentum, 'tau_t': self.teacher_temp}


@dataclass(frozen=True)
class TrainingSchedules:
    lr: ScheduleSpec
    weight_decay: ScheduleSpec
    momentum: ScheduleSpec
    teacher_temp: ScheduleSpec

    @property
    def total_steps(self) -> int:
        return self.lr.total_steps

    def at(self, step: int) -> StepHyperparams:
        return StepHyperparams(
            step=step,
            lr=schedule_value(self.lr, step),
            weight_decay=schedule_value(self.weight_decay, step),
            momentum=schedule_value(self.momentum, step),
            teacher_temp=schedule_value(self.teacher_temp, step),
        )


def build_schedules(run_config: 'RunConfig', steps_per_epoch: int) -> TrainingSchedules:
    """
    All four schedules for a run, measured in optimizer steps

    Epoch-based warmups are converted with `steps_per_epoch` and capped at the run length.
    """
    total = run_config.train.epochs * steps_per_epoch
    optim, distill = run_config.optim, run_config.distill

    def warmup(epochs: float) -> int:
        return min(total, int(round(epochs * steps_per_epoch)))

    return TrainingSchedules(
        lr=ScheduleSpec('cosine', scaled_lr(optim.base_lr, run_config.train.batch_size), optim.min_lr,
                        total, warmup(optim.warmup_epochs)),
        weight_decay=ScheduleSpec('cosine', optim.weight_decay, optim.weight_decay_end, total),
        momentum=ScheduleSpec('cosine', distill.momentum_base, distill.momentum_final, total),
        teacher_temp=ScheduleSpec('constant', distill.teacher_temp_final, distill.teacher_temp_final, total,
                                  warmup(distill.teacher_temp_warmup_epochs), start=distill.teacher_temp),
    )
