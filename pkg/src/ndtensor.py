"""
Dense n-dimensional tensors with define-by-run reverse-mode differentiation
Every differentiable op records a TapeRecord; backward replays them in reverse topological order
"""
import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .error_reporter import ContractError, DimensionError, ParameterError

PRECISIONS = {'float32': np.float32, 'float64': np.float64}

LAYER_NORM_EPS = 1e-6
L2_EPS = 1e-12

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = {'dtype': np.float32, 'grad_enabled': True}
_node_ids = itertools.count()


def get_dtype():
    return _state['dtype']


def set_precision(name: str) -> None:
    """Switch the tensor-wide precision mode ('float32' for training, 'float64' for verification)"""
    if name not in PRECISIONS:
        raise ParameterError(f"Unknown precision {name!r}, expected one of {sorted(PRECISIONS)}")
    _state['dtype'] = PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _state['dtype']
    set_precision(name)
    try:
        yield
    finally:
        _state['dtype'] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops run inside this block are never recorded"""
    previous = _state['grad_enabled']
    _state['grad_enabled'] = False
    try:
        yield
    finally:
        _state['grad_enabled'] = previous


def is_grad_enabled() -> bool:
    return _state['grad_enabled']


@dataclass(eq=False)
class TapeRecord:
    """One recorded op: inputs, output node and the vector-Jacobian product"""
    op: str
    inputs: Tuple['Tensor', ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)


class Tensor:
    """
    Numeric array that can take part in a gradient tape

    The value is never mutated after it has been recorded; optimizers rebind
    `data` to a fresh array instead.
    """

    __slots__ = ('data', 'requires_grad', 'grad', 'record', 'node_id')
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_state['dtype'] if dtype is None else dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.record: Optional[TapeRecord] = None
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> 'Tensor':
        return detach(self)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _state['grad_enabled'] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.record = TapeRecord(op, tuple(inputs), out.node_id, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out axes that forward broadcasting expanded"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make('add', a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make('sub', a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make('mul', a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make('div', a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, sa),
                            _unbroadcast(-g * a.data / (b.data * b.data), sb)))


def neg(a: Tensor) -> Tensor:
    return _make('neg', -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make('exp', out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make('log', np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Matrix product over the last two axes; leading axes follow numpy matmul
    broadcasting and their gradients are summed back to the operand shape
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make('matmul', out, (a, b), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make('sum', a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {original} into {tuple(shape)}") from e
    return _make('reshape', out, (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make('transpose', a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    advanced = _is_advanced(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make('getitem', a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make('concat', out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot stack shapes {[t.shape for t in tensors]}") from e
    return _make('stack', out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def detach(a: Tensor) -> Tensor:
    """Same values, no gradient path back to `a`"""
    return Tensor(a.data, dtype=a.data.dtype)


# ---------------------------------------------------------------------------
# Fused network ops
# ---------------------------------------------------------------------------

def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """softmax(x / temperature) along `axis`, with max subtraction"""
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((out * (g - (g * out).sum(axis=axis, keepdims=True))) / temperature,)

    return _make('softmax', out, (x,), backward)


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        probs = np.exp(out)
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make('log_softmax', out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        flat_g = g.reshape(-1, d)
        dgain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        dxhat = g * gain.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make('layer_norm', out, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF"""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _make('gelu', out, (x,), backward)


def l2_normalize(x: Tensor, eps: float = L2_EPS, axis: int = -1) -> Tensor:
    """x / max(||x||_2, eps) along `axis`"""
    if not eps > 0:
        raise ParameterError(f"l2_normalize eps must be > 0, got {eps}")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - out * radial) / denom, g / denom),)

    return _make('l2_normalize', out, (x,), backward)


# ---------------------------------------------------------------------------
# Tape replay
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Records reachable from one output, inputs always before the records that consume them"""
    records: List[TapeRecord] = field(default_factory=list)
    leaves: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> 'Tape':
        records: List[TapeRecord] = []
        leaves: List[Tensor] = []
        visited = set()
        pending: List[Tuple[Tensor, bool]] = [(output, False)]

        while pending:
            node, expanded = pending.pop()
            if expanded:
                records.append(node.record)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            if node.record is None:
                if node.requires_grad:
                    leaves.append(node)
                continue
            pending.append((node, True))
            for parent in reversed(node.record.inputs):
                if parent.requires_grad and parent.node_id not in visited:
                    pending.append((parent, False))

        return cls(records, leaves)


def backward(loss: Tensor, accumulate: bool = False) -> Tape:
    """
    Populate `grad` on every requires_grad leaf reachable from a scalar loss

    Intermediate gradients are dropped once consumed. With accumulate=False a
    reached leaf's previous grad is replaced rather than added to.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    tape = Tape.trace(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}

    for record in reversed(tape.records):
        g = grads.pop(record.output_id, None)
        if g is None:
            continue
        for tensor, tensor_grad in zip(record.inputs, record.backward(g)):
            if tensor_grad is None or not tensor.requires_grad:
                continue
            previous = grads.get(tensor.node_id)
            grads[tensor.node_id] = tensor_grad if previous is None else previous + tensor_grad

    for leaf in tape.leaves:
        g = grads.get(leaf.node_id)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = leaf.grad + g if (accumulate and leaf.grad is not None) else np.array(g)

    return tape


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               coords: Optional[Sequence[int]] = None, floor: float = 1e-8) -> float:
    """
    Max relative error between the tape gradient and central differences

    Relative error per coordinate is |analytic - cd| / max(|analytic|, |cd|, floor).
    `coords` restricts the comparison to a subset of flat indices.
    """
    if x.data.dtype != np.float64:
        raise ContractError("grad_check requires 64-bit precision")

    leaf = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    backward(f(leaf))
    analytic = np.zeros(leaf.size) if leaf.grad is None else leaf.grad.reshape(-1)

    base = x.data.reshape(-1)
    indices = range(base.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in indices:
            shifted = base.copy()
            shifted[i] = base[i] + step
            f_plus = float(f(Tensor(shifted.reshape(x.shape), dtype=np.float64)).data)
            shifted[i] = base[i] - step
            f_minus = float(f(Tensor(shifted.reshape(x.shape), dtype=np.float64)).data)
            central = (f_plus - f_minus) / (2.0 * step)
            scale = max(abs(analytic[i]), abs(central), floor)
            worst = max(worst, abs(analytic[i] - central) / scale)
    return worst
