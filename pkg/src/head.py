"""
Projection head: GELU MLP, l2-normalized bottleneck, weight-normalized prototype layer
No batch statistics anywhere, so each sample's output depends on that sample alone
"""
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import ndtensor as nd
from .error_reporter import ConfigError, DimensionError
from .ndtensor import Tensor
from .vit import ParamSet, trunc_normal

WEIGHT_NORM_EPS = 1e-12

# Full-scale prototype count; toy runs use HeadConfig.out_dim
FULL_SCALE_OUT_DIM = 65536


@dataclass(frozen=True)
class HeadConfig:
    mlp_layers: int = 3
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    out_dim: int = 1024
    init_std: float = 0.02

    def __post_init__(self):
        for name in ('mlp_layers', 'hidden_dim', 'bottleneck_dim', 'out_dim'):
            if getattr(self, name) < 1:
                raise ConfigError(f"head.{name} must be >= 1, got {getattr(self, name)}")
        if self.init_std <= 0:
            raise ConfigError(f"head.init_std must be > 0, got {self.init_std}")

    @property
    def linear_layers(self) -> int:
        return self.mlp_layers + 1


def layer_dims(config: HeadConfig, in_dim: int) -> Tuple[Tuple[int, int], ...]:
    """(fan_in, fan_out) of each MLP layer; the last one maps onto the bottleneck"""
    widths = [in_dim] + [config.hidden_dim] * (config.mlp_layers - 1) + [config.bottleneck_dim]
    return tuple(zip(widths[:-1], widths[1:]))


def param_shapes(config: HeadConfig, in_dim: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for i, (fan_in, fan_out) in enumerate(layer_dims(config, in_dim)):
        shapes[f'head.mlp.{i}.weight'] = (fan_in, fan_out)
        shapes[f'head.mlp.{i}.bias'] = (fan_out,)
    shapes['head.last_layer.weight_v'] = (config.out_dim, config.bottleneck_dim)
    return shapes


def init_params(config: HeadConfig, in_dim: int, rng: np.random.Generator,
                requires_grad: bool = True) -> ParamSet:
    dtype = nd.get_dtype()
    tensors = {}
    for name, shape in param_shapes(config, in_dim).items():
        value = np.zeros(shape) if name.endswith('.bias') else trunc_normal(shape, config.init_std, rng)
        tensors[name] = Tensor(value.astype(dtype), requires_grad=requires_grad)
    return ParamSet(tensors)


def weight_norm_linear(x: Tensor, weight_v: Tensor, eps: float = WEIGHT_NORM_EPS) -> Tensor:
    """
    out_i = <V_i / ||V_i||, x> with the gain fixed at 1 and no bias

    A zero row keeps its eps-guarded norm and produces a zero logit.
    """
    if x.shape[-1] != weight_v.shape[1]:
        raise DimensionError(f"weight_norm_linear input width {x.shape[-1]} vs rows of width {weight_v.shape[1]}")
    directions = nd.l2_normalize(weight_v, eps=eps, axis=-1)
    return x @ directions.transpose(1, 0)


def bottleneck(x: Tensor, config: HeadConfig, params: ParamSet) -> Tensor:
    """MLP output projected onto the unit sphere of the bottleneck"""
    n_layers = config.mlp_layers
    for i in range(n_layers):
        x = x @ params[f'head.mlp.{i}.weight'] + params[f'head.mlp.{i}.bias']
        if i < n_layers - 1:
            x = nd.gelu(x)
    return nd.l2_normalize(x, axis=-1)


def head_forward(x: Tensor, config: HeadConfig, params: ParamSet) -> Tensor:
    """
    Prototype logits, each in [-1, 1]

    Args:
        x: backbone features [dim] or [B, dim]

    Returns:
        Logits [K] or [B, K]
    """
    expected = params['head.mlp.0.weight'].shape[0]
    if x.shape[-1] != expected:
        raise DimensionError(f"head expects features of width {expected}, got {x.shape[-1]}")
    single = x.ndim == 1
    if single:
        x = x.reshape(1, expected)
    logits = weight_norm_linear(bottleneck(x, config, params), params['head.last_layer.weight_v'])
    return logits[0] if single else logits
