"""
Minimal Vision Transformer backbone
Patch embedding, CLS token, resolution-adapted positional table, pre-norm blocks, per-head attention records
"""
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from . import ndtensor as nd
from .error_reporter import ConfigError, ContractError, DimensionError, ParameterError
from .ndtensor import Tensor
from .resample import grid_matrix
from .unified_logging import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class ViTConfig:
    """Backbone geometry; defaults are the toy reference config"""
    patch_size: int = 4
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    base_grid: int = 8
    in_chans: int = 3
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ('patch_size', 'depth', 'dim', 'heads', 'base_grid', 'in_chans'):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ConfigError(f"model.dim={self.dim} is not divisible by model.heads={self.heads}")
        if self.mlp_ratio <= 0 or self.init_std <= 0 or self.ln_eps <= 0:
            raise ConfigError("model.mlp_ratio, model.init_std and model.ln_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def patch_pixels(self) -> int:
        return self.in_chans * self.patch_size * self.patch_size

    def grid_for(self, height: int, width: int) -> Tuple[int, int]:
        if height % self.patch_size or width % self.patch_size:
            raise ConfigError(
                f"image {height}x{width} is not divisible by patch size {self.patch_size}"
            )
        return height // self.patch_size, width // self.patch_size


class ParamSet:
    """
    Ordered mapping of parameter name -> Tensor

    Two ParamSets built from the same configs have identical names and shapes,
    which is what EMA and checkpointing rely on.
    """

    def __init__(self, tensors: Dict[str, Tensor]):
        self._tensors: Dict[str, Tensor] = dict(tensors)

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], requires_grad: bool = False) -> 'ParamSet':
        return cls({name: Tensor(np.array(value), requires_grad=requires_grad, dtype=value.dtype)
                    for name, value in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: t.shape for name, t in self._tensors.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy(self, requires_grad: Optional[bool] = None) -> 'ParamSet':
        """Deep copy with fresh leaves; requires_grad defaults to each source flag"""
        return ParamSet({
            name: Tensor(t.data.copy(),
                         requires_grad=t.requires_grad if requires_grad is None else requires_grad,
                         dtype=t.data.dtype)
            for name, t in self._tensors.items()
        })

    def merged(self, other: 'ParamSet') -> 'ParamSet':
        overlap = set(self._tensors) & set(other._tensors)
        if overlap:
            raise ContractError(f"parameter names defined twice: {sorted(overlap)}")
        return ParamSet({**self._tensors, **other._tensors})

    def check_compatible(self, other: 'ParamSet') -> None:
        if list(self._tensors) != list(other._tensors):
            missing = set(self._tensors) ^ set(other._tensors)
            raise ContractError(f"parameter sets differ in names: {sorted(missing)[:5]}")
        for name, t in self._tensors.items():
            if t.shape != other[name].shape:
                raise ContractError(f"parameter {name} has shape {t.shape} vs {other[name].shape}")

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def equal(self, other: 'ParamSet') -> bool:
        """Bitwise equality of names, shapes and values"""
        try:
            self.check_compatible(other)
        except ContractError:
            return False
        return all(np.array_equal(t.data, other[name].data) for name, t in self._tensors.items())


class AttentionRecord(NamedTuple):
    """Softmax weights of one head in one block; rows are queries and sum to 1"""
    layer: int
    head: int
    weights: np.ndarray


class BackboneOutput(NamedTuple):
    cls_out: Tensor
    patch_out: Tensor
    per_layer_cls: List[Tensor]
    attn: List[AttentionRecord]


def trunc_normal(shape: Tuple[int, ...], std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations"""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def param_shapes(config: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    d, hidden = config.dim, config.hidden_dim
    shapes = {
        'patch_embed.weight': (config.patch_pixels, d),
        'patch_embed.bias': (d,),
        'cls_token': (1, d),
        'pos_embed': (config.base_grid * config.base_grid + 1, d),
    }
    for i in range(config.depth):
        prefix = f'blocks.{i}'
        shapes.update({
            f'{prefix}.norm1.gain': (d,),
            f'{prefix}.norm1.bias': (d,),
            f'{prefix}.attn.qkv.weight': (d, 3 * d),
            f'{prefix}.attn.qkv.bias': (3 * d,),
            f'{prefix}.attn.proj.weight': (d, d),
            f'{prefix}.attn.proj.bias': (d,),
            f'{prefix}.norm2.gain': (d,),
            f'{prefix}.norm2.bias': (d,),
            f'{prefix}.mlp.fc1.weight': (d, hidden),
            f'{prefix}.mlp.fc1.bias': (hidden,),
            f'{prefix}.mlp.fc2.weight': (hidden, d),
            f'{prefix}.mlp.fc2.bias': (d,),
        })
    shapes['norm.gain'] = (d,)
    shapes['norm.bias'] = (d,)
    return shapes


def init_params(config: ViTConfig, rng: np.random.Generator, requires_grad: bool = True) -> ParamSet:
    """
    Truncated-normal weights, embeddings and CLS token; zero biases; unit norm gains

    Parameters are drawn in name order from `rng`.
    """
    dtype = nd.get_dtype()
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith('.gain'):
            value = np.ones(shape)
        elif name.endswith('.bias'):
            value = np.zeros(shape)
        else:
            value = trunc_normal(shape, config.init_std, rng)
        tensors[name] = Tensor(value.astype(dtype), requires_grad=requires_grad)

    params = ParamSet(tensors)
    logger.debug(f"Initialized backbone with {params.num_elements()} parameters",
                 extra={'depth': config.depth, 'dim': config.dim})
    return params


def _as_batch(images: Union[Tensor, np.ndarray]) -> Tuple[np.ndarray, bool]:
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    if data.ndim == 3:
        return data[None], True
    if data.ndim != 4:
        raise DimensionError(f"expected image [C,H,W] or batch [B,C,H,W], got shape {data.shape}")
    return data, False


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, T, C*N*N]; tokens in raster order, patch pixels in (C, N, N) order"""
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    patches = images.reshape(b, c, gh, patch_size, gw, patch_size)
    patches = patches.transpose(0, 2, 4, 1, 3, 5)
    return patches.reshape(b, gh * gw, c * patch_size * patch_size)


def patch_embed(images: Union[Tensor, np.ndarray], config: ViTConfig, params: ParamSet) -> Tensor:
    """
    Linear projection of non-overlapping N x N patches

    Args:
        images: [C, H, W] or [B, C, H, W]

    Returns:
        Tokens [T, dim] (or [B, T, dim]) in raster order
    """
    batch, single = _as_batch(images)
    if batch.shape[1] != config.in_chans:
        raise DimensionError(f"expected {config.in_chans} channels, got {batch.shape[1]}")
    config.grid_for(batch.shape[2], batch.shape[3])
    patches = Tensor(patchify(batch, config.patch_size))
    tokens = patches @ params['patch_embed.weight'] + params['patch_embed.bias']
    return tokens[0] if single else tokens


def _grid_size(table: Tensor) -> int:
    slots = table.shape[0] - 1
    g = int(math.isqrt(slots)) if slots >= 0 else 0
    if slots < 1 or g * g != slots:
        raise ContractError(f"positional table with {table.shape[0]} rows is not 1 + g*g")
    return g


def interpolate_pos_embed(table: Tensor, target_grid: Union[int, Tuple[int, int]]) -> Tensor:
    """
    Adapt a [(g*g + 1), dim] positional table to a t x t grid

    The CLS row is copied; grid rows are bicubically resampled as a g x g x dim
    field. A target equal to g returns the table itself.
    """
    g = _grid_size(table)
    th, tw = (target_grid, target_grid) if isinstance(target_grid, int) else target_grid
    if th == g and tw == g:
        return table

    dim = table.shape[1]
    rows = Tensor(grid_matrix(g, th))
    cols = Tensor(grid_matrix(g, tw))
    field = table[1:].reshape(g, g * dim)
    field = (rows @ field).reshape(th, g, dim).transpose(1, 0, 2).reshape(g, th * dim)
    field = (cols @ field).reshape(tw, th, dim).transpose(1, 0, 2).reshape(th * tw, dim)
    return nd.concat([table[0:1], field], axis=0)


def attention(x: Tensor, params: ParamSet, prefix: str, config: ViTConfig,
              layer: int = 0, collect: bool = True) -> Tuple[Tensor, List[AttentionRecord]]:
    """
    Multi-head self-attention with a fused QKV projection

    Args:
        x: tokens [T, dim] or [B, T, dim] (already layer-normed)
        prefix: parameter prefix of the block, e.g. 'blocks.0'

    Returns:
        Projected output of the same shape and one AttentionRecord per head
    """
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    b, t, d = x.shape
    if t < 1 or d != config.dim:
        raise DimensionError(f"attention input {x.shape} does not match dim {config.dim}")
    heads, head_dim = config.heads, config.head_dim

    qkv = x @ params[f'{prefix}.attn.qkv.weight'] + params[f'{prefix}.attn.qkv.bias']
    qkv = qkv.reshape(b, t, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]

    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    weights = nd.softmax(scores, axis=-1)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = mixed @ params[f'{prefix}.attn.proj.weight'] + params[f'{prefix}.attn.proj.bias']

    records = []
    if collect:
        for h in range(heads):
            w = weights.data[:, h]
            records.append(AttentionRecord(layer, h, w[0] if single else w))
    return (out[0] if single else out), records


def mlp(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    hidden = nd.gelu(x @ params[f'{prefix}.mlp.fc1.weight'] + params[f'{prefix}.mlp.fc1.bias'])
    return hidden @ params[f'{prefix}.mlp.fc2.weight'] + params[f'{prefix}.mlp.fc2.bias']


def block_forward(x: Tensor, params: ParamSet, index: int, config: ViTConfig,
                  collect: bool) -> Tuple[Tensor, List[AttentionRecord]]:
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x))"""
    prefix = f'blocks.{index}'
    normed = nd.layer_norm(x, params[f'{prefix}.norm1.gain'], params[f'{prefix}.norm1.bias'], config.ln_eps)
    attended, records = attention(normed, params, prefix, config, layer=index, collect=collect)
    x = x + attended
    normed = nd.layer_norm(x, params[f'{prefix}.norm2.gain'], params[f'{prefix}.norm2.bias'], config.ln_eps)
    return x + mlp(normed, params, prefix), records


def vit_forward(images: Union[Tensor, np.ndarray], config: ViTConfig, params: ParamSet,
                collect_attn: bool = False) -> BackboneOutput:
    """
    Full backbone pass

    Accepts one image [C, H, W] or a batch [B, C, H, W] of equal size. For a
    single image every output drops the batch axis. per_layer_cls holds the CLS
    row after each block; the last entry is taken after the final layer norm.
    """
    batch, single = _as_batch(images)
    gh, gw = config.grid_for(batch.shape[2], batch.shape[3])
    b, d = batch.shape[0], config.dim

    tokens = patch_embed(batch, config, params)
    cls = params['cls_token'].reshape(1, 1, d) + Tensor(np.zeros((b, 1, d)))
    x = nd.concat([cls, tokens], axis=1)
    x = x + interpolate_pos_embed(params['pos_embed'], (gh, gw))

    per_layer_cls: List[Tensor] = []
    attn: List[AttentionRecord] = []
    for i in range(config.depth):
        x, records = block_forward(x, params, i, config, collect_attn)
        attn.extend(records)
        per_layer_cls.append(x[:, 0])

    x = nd.layer_norm(x, params['norm.gain'], params['norm.bias'], config.ln_eps)
    cls_out = x[:, 0]
    per_layer_cls[-1] = cls_out
    patch_out = x[:, 1:]

    if single:
        cls_out, patch_out = cls_out[0], patch_out[0]
        per_layer_cls = [c[0] for c in per_layer_cls]
        attn = [AttentionRecord(r.layer, r.head, r.weights[0]) for r in attn]
    return BackboneOutput(cls_out, patch_out, per_layer_cls, attn)


def cls_concat(per_layer_cls: Sequence[Tensor], layers: int) -> Tensor:
    """Concatenate the CLS vectors of the last `layers` blocks, last block first"""
    if not 1 <= layers <= len(per_layer_cls):
        raise ParameterError(f"layers must be in [1, {len(per_layer_cls)}], got {layers}")
    selected = list(per_layer_cls[::-1][:layers])
    return selected[0] if layers == 1 else nd.concat(selected, axis=-1)
