"""
Self-distillation engine
Teacher target construction, multi-crop cross-entropy, center and teacher updates, collapse diagnostics
"""
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import entr, rel_entr, softmax as np_softmax, xlogy

from . import ndtensor as nd
from .error_reporter import ConfigError, ContractError, NumericError, ParameterError
from .model import DinoModel
from .ndtensor import Tensor
from .optimizer import AdamW
from .schedules import StepHyperparams
from .unified_logging import get_logger
from .views import ViewConfig, make_batch_views
from .vit import ParamSet

logger = get_logger(__name__)

TEACHER_NORMS = ('centering', 'sinkhorn', 'softmax_batch', 'none')
TEACHER_MODES = ('momentum', 'student_copy', 'previous_epoch')

# Clamp for log of student probabilities in the collapse diagnostics
PROB_EPS = 1e-30


@dataclass(frozen=True)
class DistillConfig:
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_temp_final: float = 0.07
    teacher_temp_warmup_epochs: float = 30.0
    center_momentum: float = 0.9
    momentum_base: float = 0.996
    momentum_final: float = 1.0
    teacher_norm: str = 'centering'
    sinkhorn_iters: int = 3
    sinkhorn_tau: float = 0.05
    teacher_mode: str = 'momentum'

    def __post_init__(self):
        for name in ('student_temp', 'teacher_temp', 'teacher_temp_final', 'sinkhorn_tau'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"distill.{name} must be > 0, got {getattr(self, name)}")
        for name in ('center_momentum', 'momentum_base', 'momentum_final'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"distill.{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.teacher_temp_warmup_epochs < 0:
            raise ConfigError("distill.teacher_temp_warmup_epochs must be >= 0")
        if self.teacher_norm not in TEACHER_NORMS:
            raise ConfigError(f"distill.teacher_norm must be one of {TEACHER_NORMS}, got {self.teacher_norm!r}")
        if self.teacher_mode not in TEACHER_MODES:
            raise ConfigError(f"distill.teacher_mode must be one of {TEACHER_MODES}, got {self.teacher_mode!r}")
        if self.sinkhorn_iters < 1:
            raise ConfigError(f"distill.sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")

    @property
    def uses_center(self) -> bool:
        return self.teacher_norm == 'centering'


@dataclass
class DistillState:
    """Teacher parameters (never on a tape), center vector and counters"""
    teacher: ParamSet
    center: np.ndarray
    step: int = 0
    epoch: int = 0

    @classmethod
    def initialize(cls, student: ParamSet, out_dim: int) -> 'DistillState':
        """Teacher starts as an exact copy of the student; the center starts at zero"""
        return cls(student.copy(requires_grad=False), np.zeros(out_dim, dtype=nd.get_dtype()))


class CollapseMetrics(NamedTuple):
    h: float
    kl: float
    ce: float


@dataclass(frozen=True)
class StepMetrics:
    step: int
    epoch: int
    loss: float
    h: float
    kl: float
    ce: float
    momentum: float
    tau_t: float
    lr: float
    wd: float

    def to_record(self) -> Dict[str, float]:
        return {
            'step': self.step, 'epoch': self.epoch, 'loss': self.loss,
            'h': self.h, 'kl': self.kl, 'ce': self.ce,
            'lambda': self.momentum, 'tau_t': self.tau_t, 'lr': self.lr, 'wd': self.wd,
        }


# ---------------------------------------------------------------------------
# Probabilities and targets
# ---------------------------------------------------------------------------

def student_probs(logits: Tensor, student_temp: float) -> Tensor:
    return nd.softmax(logits, student_temp, axis=-1)


def _off_tape(logits) -> np.ndarray:
    if isinstance(logits, Tensor):
        if logits.requires_grad:
            raise ContractError("teacher logits must be detached from the gradient tape")
        return logits.data
    return np.asarray(logits)


def teacher_probs_centered(logits, center: np.ndarray, teacher_temp: float) -> np.ndarray:
    """softmax((logits - center) / teacher_temp) row-wise, as a plain array"""
    data = _off_tape(logits)
    with nd.no_grad():
        return nd.softmax(Tensor(data - center, dtype=data.dtype), teacher_temp, axis=-1).data


def sinkhorn(logits: np.ndarray, tau: float, num_iters: int) -> np.ndarray:
    """
    exp(logits / tau), then num_iters rounds of column then row normalization

    Columns are shifted by their max before exp; the following column
    normalization cancels the shift. Rows of the result sum to 1.
    """
    if not tau > 0:
        raise ParameterError(f"sinkhorn tau must be > 0, got {tau}")
    if num_iters < 1:
        raise ParameterError(f"sinkhorn needs at least one iteration, got {num_iters}")
    z = np.asarray(logits) / tau
    x = np.exp(z - z.max(axis=0, keepdims=True))
    for _ in range(num_iters):
        x = x / x.sum(axis=0, keepdims=True)
        x = x / x.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"sinkhorn produced non-finite values (tau={tau}, iters={num_iters})")
    return x


def softmax_batch(logits: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over the batch axis, then rows renormalized"""
    if not tau > 0:
        raise ParameterError(f"softmax_batch tau must be > 0, got {tau}")
    z = np.asarray(logits) / tau
    x = np.exp(z - z.max(axis=0, keepdims=True))
    x = x / x.sum(axis=0, keepdims=True)
    return x / x.sum(axis=1, keepdims=True)


def build_teacher_targets(teacher_logits: Sequence, center: np.ndarray, config: DistillConfig,
                          teacher_temp: float) -> List[np.ndarray]:
    """
    Target distributions for the two global views

    Batch-level normalizations (sinkhorn, softmax_batch) run on both global
    views stacked as one [2B, K] matrix.
    """
    arrays = [_off_tape(t) for t in teacher_logits]
    if config.teacher_norm == 'centering':
        return [teacher_probs_centered(a, center, teacher_temp) for a in arrays]
    if config.teacher_norm == 'none':
        return [teacher_probs_centered(a, np.zeros_like(center), teacher_temp) for a in arrays]

    stacked = np.concatenate(arrays, axis=0)
    if config.teacher_norm == 'sinkhorn':
        balanced = sinkhorn(stacked, config.sinkhorn_tau, config.sinkhorn_iters)
    else:
        balanced = softmax_batch(stacked, config.sinkhorn_tau)
    balanced = balanced.astype(stacked.dtype, copy=False)
    return np.split(balanced, np.cumsum([len(a) for a in arrays])[:-1], axis=0)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def cross_entropy(targets: np.ndarray, student_logits: Tensor, student_temp: float) -> Tensor:
    """Batch mean of -sum_k P_t log P_s"""
    log_probs = nd.log_softmax(student_logits, student_temp, axis=-1)
    return -(Tensor(targets, dtype=log_probs.dtype) * log_probs).sum(axis=-1).mean()


def view_pairs(n_views: int) -> List[Tuple[int, int]]:
    """(teacher view, student view) pairs in ascending order, same-view pairs skipped"""
    return [(t, s) for t in (0, 1) for s in range(n_views) if s != t]


def pair_loss(student_logits: Sequence[Tensor], targets: Sequence[np.ndarray],
              student_temp: float) -> Tensor:
    if len(targets) != 2:
        raise ContractError(f"exactly 2 global teacher views are required, got {len(targets)}")
    if len(student_logits) < 2:
        raise ContractError(f"at least the 2 global views are required, got {len(student_logits)}")
    pairs = view_pairs(len(student_logits))
    total = None
    for t, s in pairs:
        term = cross_entropy(targets[t], student_logits[s], student_temp)
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))


def dino_loss(student_logits: Sequence[Tensor], teacher_logits: Sequence, state: DistillState,
              config: DistillConfig, teacher_temp: Optional[float] = None) -> Tensor:
    """
    Mean cross-entropy over every (global teacher view, other student view) pair

    Args:
        student_logits: one [B, K] tensor per view, globals first
        teacher_logits: [B, K] logits of the two global views, off the tape
        teacher_temp: defaults to the final teacher temperature
    """
    tau_t = config.teacher_temp_final if teacher_temp is None else teacher_temp
    targets = build_teacher_targets(teacher_logits, state.center, config, tau_t)
    return pair_loss(student_logits, targets, config.student_temp)


# ---------------------------------------------------------------------------
# State updates
# ---------------------------------------------------------------------------

def update_center(center: np.ndarray, teacher_logits_all, momentum: float) -> np.ndarray:
    """c <- m c + (1 - m) * column mean of all global-view teacher logits"""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"center momentum must lie in [0, 1], got {momentum}")
    batch_mean = _off_tape(teacher_logits_all).mean(axis=0)
    return (center * momentum + batch_mean * (1.0 - momentum)).astype(center.dtype, copy=False)


def ema_update(teacher: ParamSet, student: ParamSet, momentum: float) -> ParamSet:
    """theta_t <- lambda theta_t + (1 - lambda) theta_s for every named parameter"""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"teacher momentum must lie in [0, 1], got {momentum}")
    teacher.check_compatible(student)
    updated = {}
    for name, t in teacher.items():
        dtype = t.data.dtype
        value = t.data * dtype.type(momentum) + student[name].data * dtype.type(1.0 - momentum)
        updated[name] = Tensor(value, dtype=dtype)
    return ParamSet(updated)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def collapse_metrics(teacher_probs: np.ndarray, student_probs_: np.ndarray) -> CollapseMetrics:
    """
    Batch means of entropy h(P_t), KL(P_t || P_s) and cross-entropy H(P_t, P_s)

    Computed in 64-bit; 0 log 0 counts as 0 and student probabilities are
    clamped at PROB_EPS inside logs, so ce = h + kl up to rounding.
    """
    p = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs, dtype=np.float64)
    q = np.asarray(student_probs_.data if isinstance(student_probs_, Tensor) else student_probs_, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"probability shapes differ: {p.shape} vs {q.shape}")
    q = np.maximum(q, PROB_EPS)
    h = entr(p).sum(axis=-1)
    kl = rel_entr(p, q).sum(axis=-1)
    ce = -xlogy(p, q).sum(axis=-1)
    return CollapseMetrics(float(h.mean()), float(kl.mean()), float(ce.mean()))


def pair_collapse_metrics(student_logits: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                          student_temp: float) -> CollapseMetrics:
    """Collapse metrics averaged over the same pair set as the loss"""
    pairs = view_pairs(len(student_logits))
    probs = [np_softmax(np.asarray(s, dtype=np.float64) / student_temp, axis=-1) for s in student_logits]
    values = np.array([collapse_metrics(targets[t], probs[s]) for t, s in pairs])
    h, kl, ce = values.mean(axis=0)
    return CollapseMetrics(float(h), float(kl), float(ce))


# ---------------------------------------------------------------------------
# One training step
# ---------------------------------------------------------------------------

def _forward_views(model: DinoModel, slots: Sequence[np.ndarray], params: ParamSet) -> List[Tensor]:
    """Head logits per view; views of equal resolution share one backbone pass"""
    groups: Dict[int, List[int]] = {}
    for index, slot in enumerate(slots):
        groups.setdefault(slot.shape[-1], []).append(index)

    logits: List[Optional[Tensor]] = [None] * len(slots)
    for indices in groups.values():
        batch = np.concatenate([slots[i] for i in indices], axis=0)
        out = model.forward(batch, params)
        size = slots[indices[0]].shape[0]
        for j, index in enumerate(indices):
            logits[index] = out[j * size:(j + 1) * size]
    return logits


def train_step(images: np.ndarray, sample_ids: Sequence[int], model: DinoModel, state: DistillState,
               config: DistillConfig, view_config: ViewConfig, optimizer: AdamW,
               hyper: StepHyperparams, seed: int, epoch: int = 0) -> StepMetrics:
    """
    One distillation step, in order: views, student forward on all views,
    teacher forward on the two global views off the tape, loss, backward,
    optimizer update, teacher update, center update
    """
    student = model.params
    if config.teacher_mode == 'previous_epoch' and epoch > state.epoch:
        state.teacher = student.copy(requires_grad=False)
    state.epoch = epoch

    views = make_batch_views(images, sample_ids, view_config, seed, state.step)
    student_logits = _forward_views(model, views.slots, student)

    with nd.no_grad():
        teacher_logits = _forward_views(model, views.slots[:2], state.teacher)
    teacher_arrays = [t.data for t in teacher_logits]

    targets = build_teacher_targets(teacher_arrays, state.center, config, hyper.teacher_temp)
    loss = pair_loss(student_logits, targets, config.student_temp)

    student.zero_grad()
    nd.backward(loss)
    optimizer.step(student, hyper.lr, hyper.weight_decay)

    if config.teacher_mode == 'momentum':
        state.teacher = ema_update(state.teacher, student, hyper.momentum)
    elif config.teacher_mode == 'student_copy':
        state.teacher = student.copy(requires_grad=False)

    if config.uses_center:
        state.center = update_center(state.center, np.concatenate(teacher_arrays, axis=0),
                                     config.center_momentum)

    diagnostics = pair_collapse_metrics([s.data for s in student_logits], targets, config.student_temp)
    metrics = StepMetrics(
        step=state.step, epoch=epoch, loss=float(loss.data),
        h=diagnostics.h, kl=diagnostics.kl, ce=diagnostics.ce,
        momentum=hyper.momentum, tau_t=hyper.teacher_temp, lr=hyper.lr, wd=hyper.weight_decay,
    )
    state.step += 1
    logger.debug(f"Step {metrics.step} loss={metrics.loss:.5f} kl={metrics.kl:.5f}",
                 extra={'step': metrics.step, 'epoch': epoch})
    return metrics
