"""
AdamW with decoupled weight decay over a ParamSet
"""
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .error_reporter import ConfigError, ContractError
from .vit import ParamSet


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer settings; lr is per 256 samples and scaled by batch size"""
    base_lr: float = 0.0005
    min_lr: float = 1e-6
    warmup_epochs: float = 10.0
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.base_lr < 0 or self.min_lr < 0 or self.warmup_epochs < 0:
            raise ConfigError("optim.base_lr, optim.min_lr and optim.warmup_epochs must be >= 0")
        if self.weight_decay < 0 or self.weight_decay_end < 0:
            raise ConfigError("optim.weight_decay values must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"optim betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"optim.eps must be > 0, got {self.eps}")


def decays(name: str, value: np.ndarray) -> bool:
    """Biases and 1-D parameters (norm gains) are never decayed"""
    return value.ndim > 1 and not name.endswith('.bias')


class AdamW:
    """
    Adam moments with weight decay applied directly to the weights

    Update per parameter p with gradient g at step t:
        p <- p * (1 - lr * wd)          (decayed parameters only)
        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params: ParamSet, config: OptimConfig):
        self.config = config
        self.step_count = 0
        self.exp_avg: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.exp_avg_sq: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, params: ParamSet, lr: float, weight_decay: float) -> None:
        """Apply one update; parameters without a gradient are left untouched"""
        cfg = self.config
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1 ** self.step_count
        bias2 = 1.0 - cfg.beta2 ** self.step_count

        for name, tensor in params.items():
            if tensor.grad is None:
                continue
            if name not in self.exp_avg:
                raise ContractError(f"optimizer has no state for parameter {name}")
            dtype = tensor.data.dtype
            grad = tensor.grad
            value = tensor.data
            if weight_decay and decays(name, value):
                value = value * dtype.type(1.0 - lr * weight_decay)

            m = self.exp_avg[name] * cfg.beta1 + grad * (1.0 - cfg.beta1)
            v = self.exp_avg_sq[name] * cfg.beta2 + (grad * grad) * (1.0 - cfg.beta2)
            self.exp_avg[name] = m.astype(dtype, copy=False)
            self.exp_avg_sq[name] = v.astype(dtype, copy=False)

            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            tensor.data = (value - lr * update).astype(dtype, copy=False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {'optim.step': np.array([self.step_count], dtype=np.int64)}
        for name in self.exp_avg:
            state[f'optim.exp_avg.{name}'] = self.exp_avg[name]
            state[f'optim.exp_avg_sq.{name}'] = self.exp_avg_sq[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        try:
            self.step_count = int(state['optim.step'][0])
            for name in self.exp_avg:
                self.exp_avg[name] = np.array(state[f'optim.exp_avg.{name}'])
                self.exp_avg_sq[name] = np.array(state[f'optim.exp_avg_sq.{name}'])
        except KeyError as e:
            raise ContractError(f"optimizer state is missing entry {e}") from e
