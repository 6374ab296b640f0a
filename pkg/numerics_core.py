"""
Dense float64 arrays with reverse-mode gradients.

Every tensor the encoders, losses and probes compute is an NDValue. Ops
record their parents and a backward closure; ``NDValue.backward`` walks
the graph in reverse topological order. The module also carries the
AdamW optimizer, the cosine learning-rate schedule, a finite-difference
gradient checker and the checkpoint container.
"""
import contextlib
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from errors import ConfigError, DataError, NumericsError, ShapeError

logger = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without building a gradient graph"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class NDValue:
    """A float64 array that remembers how it was computed"""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str = ''):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['NDValue', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = 'leaf'

    def __repr__(self):
        return f"NDValue(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every leaf that requires gradients"""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError('backward', self.shape, (), 'implicit gradient needs a scalar output')
            grad = np.ones_like(self.data)
        order: List[NDValue] = []
        visited = set()
        stack: List[Tuple[NDValue, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        _accumulate(self, np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # method forms of the common ops
    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


class Parameter(NDValue):
    """Trainable leaf; ``no_decay`` exempts it from decoupled weight decay"""

    def __init__(self, data, no_decay: bool = False, name: str = ''):
        super().__init__(data, requires_grad=True, name=name)
        self.no_decay = no_decay
        self._op = 'parameter'


Operand = Union[NDValue, np.ndarray, float, int]


def as_value(x: Operand) -> NDValue:
    """Wrap constants; NDValues pass through untouched"""
    if isinstance(x, NDValue):
        return x
    return NDValue(x)


def _result(data, parents: Tuple[NDValue, ...], op: str,
            backward: Callable[[np.ndarray], None]) -> NDValue:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite output in op '{op}'")
    out = NDValue.__new__(NDValue)
    out.data = data
    out.grad = None
    out.name = ''
    out._op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(node: NDValue, grad: np.ndarray):
    if not node.requires_grad:
        return
    if grad.shape != node.data.shape:
        grad = _unbroadcast(grad, node.data.shape)
    if node.grad is None:
        node.grad = np.array(grad, dtype=np.float64)
    else:
        node.grad = node.grad + grad


def _check_broadcast(op: str, a: NDValue, b: NDValue):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------- elementwise

def add(a: Operand, b: Operand) -> NDValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast('add', a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _result(a.data + b.data, (a, b), 'add', backward)


def sub(a: Operand, b: Operand) -> NDValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast('sub', a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _result(a.data - b.data, (a, b), 'sub', backward)


def mul(a: Operand, b: Operand) -> NDValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast('mul', a, b)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _result(a.data * b.data, (a, b), 'mul', backward)


def div(a: Operand, b: Operand) -> NDValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast('div', a, b)

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))
    return _result(a.data / b.data, (a, b), 'div', backward)


def neg(a: Operand) -> NDValue:
    a = as_value(a)

    def backward(g):
        _accumulate(a, -g)
    return _result(-a.data, (a,), 'neg', backward)


def power(a: Operand, exponent: float) -> NDValue:
    a = as_value(a)
    exponent = float(exponent)

    def backward(g):
        _accumulate(a, g * exponent * np.power(a.data, exponent - 1.0))
    return _result(np.power(a.data, exponent), (a,), 'power', backward)


def exp(a: Operand) -> NDValue:
    a = as_value(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)
    return _result(out_data, (a,), 'exp', backward)


def log(a: Operand) -> NDValue:
    a = as_value(a)
    with np.errstate(divide='ignore', invalid='ignore'):
        out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)
    return _result(out_data, (a,), 'log', backward)


def sqrt(a: Operand) -> NDValue:
    a = as_value(a)
    with np.errstate(invalid='ignore'):
        out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / out_data)
    return _result(out_data, (a,), 'sqrt', backward)


def abs_(a: Operand) -> NDValue:
    a = as_value(a)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))
    return _result(np.abs(a.data), (a,), 'abs', backward)


def maximum(a: Operand, floor: float) -> NDValue:
    """Elementwise max against a constant floor; gradient passes above the floor"""
    a = as_value(a)

    def backward(g):
        _accumulate(a, g * (a.data > floor))
    return _result(np.maximum(a.data, floor), (a,), 'maximum', backward)


def tanh(a: Operand) -> NDValue:
    a = as_value(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))
    return _result(out_data, (a,), 'tanh', backward)


def sigmoid(a: Operand) -> NDValue:
    a = as_value(a)
    out_data = expit(a.data)

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))
    return _result(out_data, (a,), 'sigmoid', backward)


def silu(a: Operand) -> NDValue:
    a = as_value(a)
    s = expit(a.data)

    def backward(g):
        _accumulate(a, g * (s + a.data * s * (1.0 - s)))
    return _result(a.data * s, (a,), 'silu', backward)


def softplus(a: Operand) -> NDValue:
    a = as_value(a)

    def backward(g):
        _accumulate(a, g * expit(a.data))
    return _result(np.logaddexp(0.0, a.data), (a,), 'softplus', backward)


def gelu(a: Operand) -> NDValue:
    """Exact (erf) GELU"""
    a = as_value(a)
    cdf = 0.5 * (1.0 + erf(a.data / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) / math.sqrt(2.0 * math.pi)
        _accumulate(a, g * (cdf + a.data * pdf))
    return _result(a.data * cdf, (a,), 'gelu', backward)


# ----------------------------------------------------------------- reductions

def reduce_sum(a: Operand, axis=None, keepdims: bool = False) -> NDValue:
    a = as_value(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), 'sum', backward)


def reduce_mean(a: Operand, axis=None, keepdims: bool = False) -> NDValue:
    a = as_value(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def logsumexp(a: Operand, axis: int = -1, keepdims: bool = False) -> NDValue:
    a = as_value(a)
    shift = a.data.max(axis=axis, keepdims=True)
    weights = np.exp(a.data - shift)
    total = weights.sum(axis=axis, keepdims=True)
    out_keep = np.log(total) + shift

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * weights / total)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    return _result(out, (a,), 'logsumexp', backward)


def softmax(a: Operand, axis: int = -1) -> NDValue:
    a = as_value(a)
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out_data = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))
    return _result(out_data, (a,), 'softmax', backward)


def log_softmax(a: Operand, axis: int = -1) -> NDValue:
    a = as_value(a)
    shift = a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(a.data - shift).sum(axis=axis, keepdims=True)) + shift
    out_data = a.data - lse

    def backward(g):
        probs = np.exp(out_data)
        _accumulate(a, g - probs * g.sum(axis=axis, keepdims=True))
    return _result(out_data, (a,), 'log_softmax', backward)


# -------------------------------------------------------------- shape and index

def reshape(a: Operand, shape) -> NDValue:
    a = as_value(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', a.shape, tuple(np.atleast_1d(shape))) from None

    def backward(g):
        _accumulate(a, g.reshape(a.shape))
    return _result(out_data, (a,), 'reshape', backward)


def transpose(a: Operand, axes=None) -> NDValue:
    a = as_value(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))
    return _result(a.data.transpose(axes), (a,), 'transpose', backward)


def swapaxes(a: Operand, axis1: int, axis2: int) -> NDValue:
    a = as_value(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None for i in items)


def getitem(a: Operand, index) -> NDValue:
    """Basic and advanced indexing; the backward pass scatter-adds"""
    a = as_value(a)
    out_data = np.array(a.data[index])
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        _accumulate(a, full)
    return _result(out_data, (a,), 'getitem', backward)


def flip(a: Operand, axis: int = 0) -> NDValue:
    a = as_value(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(None, None, -1)
    return getitem(a, tuple(index))


def concat(values: Sequence[Operand], axis: int = 0) -> NDValue:
    values = [as_value(v) for v in values]
    try:
        out_data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError('concat', values[0].shape, values[-1].shape) from None
    sizes = [v.shape[axis] for v in values]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for value, piece in zip(values, np.split(g, bounds, axis=axis)):
            _accumulate(value, piece)
    return _result(out_data, tuple(values), 'concat', backward)


def stack(values: Sequence[Operand], axis: int = 0) -> NDValue:
    values = [as_value(v) for v in values]
    shapes = {v.shape for v in values}
    if len(shapes) > 1:
        raise ShapeError('stack', values[0].shape, next(v.shape for v in values if v.shape != values[0].shape))

    def backward(g):
        for i, value in enumerate(values):
            _accumulate(value, np.take(g, i, axis=axis))
    return _result(np.stack([v.data for v in values], axis=axis), tuple(values), 'stack', backward)


def scatter_add(values: Operand, index: np.ndarray, size: int) -> NDValue:
    """out[index[r]] += values[r] along the first axis of an output with ``size`` rows"""
    values = as_value(values)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != values.shape[:1]:
        raise ShapeError('scatter_add', values.shape, index.shape, 'one index per row')
    out_data = np.zeros((size,) + values.shape[1:])
    np.add.at(out_data, index, values.data)

    def backward(g):
        _accumulate(values, g[index])
    return _result(out_data, (values,), 'scatter_add', backward)


# ------------------------------------------------------------- linear algebra

def matmul(a: Operand, b: Operand) -> NDValue:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError('matmul', a.shape, b.shape, 'batch dimensions') from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)
    return _result(a.data @ b.data, (a, b), 'matmul', backward)


def conv1d(x: Operand, weight: Operand, bias: Optional[Operand] = None,
           stride: int = 1, groups: int = 1) -> NDValue:
    """Valid (unpadded) 1-D convolution of x [N, Cin, L] with weight [Cout, Cin/groups, K]"""
    x, weight = as_value(x), as_value(weight)
    n, c_in, length = x.shape
    c_out, c_group, kernel = weight.shape
    if c_in != c_group * groups or c_out % groups:
        raise ShapeError('conv1d', x.shape, weight.shape, f"groups={groups}")
    if length < kernel:
        raise ShapeError('conv1d', x.shape, weight.shape, 'input shorter than kernel')
    l_out = (length - kernel) // stride + 1
    window = (np.arange(l_out) * stride)[:, None] + np.arange(kernel)[None, :]
    cols = x.data[:, :, window].reshape(n, groups, c_group, l_out, kernel)
    w_g = weight.data.reshape(groups, c_out // groups, c_group, kernel)
    out_data = np.einsum('ngclk,gock->ngol', cols, w_g).reshape(n, c_out, l_out)
    parents: Tuple[NDValue, ...] = (x, weight)
    if bias is not None:
        bias = as_value(bias)
        out_data = out_data + bias.data[None, :, None]
        parents = (x, weight, bias)

    def backward(g):
        g_g = g.reshape(n, groups, c_out // groups, l_out)
        if weight.requires_grad:
            _accumulate(weight, np.einsum('ngol,ngclk->gock', g_g, cols).reshape(weight.shape))
        if x.requires_grad:
            d_cols = np.einsum('ngol,gock->ngclk', g_g, w_g).reshape(n, c_in, l_out, kernel)
            dx = np.zeros_like(x.data)
            span = stride * (l_out - 1) + 1
            for k in range(kernel):
                dx[:, :, k:k + span:stride] += d_cols[:, :, :, k]
            _accumulate(x, dx)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2)))
    return _result(out_data, parents, 'conv1d', backward)


def linear_recurrence(decay: Operand, drive: Operand) -> NDValue:
    """h_t = decay_t * h_{t-1} + drive_t along axis 0, starting from h_{-1} = 0"""
    decay, drive = as_value(decay), as_value(drive)
    if decay.shape != drive.shape:
        raise ShapeError('linear_recurrence', decay.shape, drive.shape)
    steps = drive.shape[0]
    states = np.empty_like(drive.data)
    state = np.zeros(drive.shape[1:])
    for t in range(steps):
        state = decay.data[t] * state + drive.data[t]
        states[t] = state
    if not np.all(np.isfinite(states)):
        bad = int(np.argmax((~np.isfinite(states.reshape(steps, -1))).any(axis=1)))
        raise NumericsError(f"non-finite recurrent state at step {bad}")

    def backward(g):
        d_decay = np.empty_like(states)
        d_drive = np.empty_like(states)
        carry = np.zeros(drive.shape[1:])
        for t in range(steps - 1, -1, -1):
            total = g[t] + carry
            d_drive[t] = total
            d_decay[t] = total * states[t - 1] if t > 0 else 0.0
            carry = total * decay.data[t]
        _accumulate(decay, d_decay)
        _accumulate(drive, d_drive)
    return _result(states, (decay, drive), 'linear_recurrence', backward)


# ------------------------------------------------------------------ composites

def l2_normalize(x: Operand, axis: int = -1, eps: float = 1e-12) -> NDValue:
    x = as_value(x)
    return x * power(reduce_sum(x * x, axis=axis, keepdims=True) + eps, -0.5)


def rms_norm(x: Operand, weight: Optional[Operand] = None, eps: float = 1e-8) -> NDValue:
    """x / rms(x) over the last axis, optionally scaled per feature"""
    x = as_value(x)
    normed = x * power(reduce_mean(x * x, axis=-1, keepdims=True) + eps, -0.5)
    return normed * weight if weight is not None else normed


# ------------------------------------------------------------ gradient checking

@dataclass
class GradCheckReport:
    max_relative_error: float
    per_input: List[float]
    checked_entries: int


def grad_check(scalar_fn: Callable[[List[NDValue]], NDValue], inputs: Sequence[NDValue],
               eps: float = 1e-5, max_entries: Optional[int] = None,
               seed: int = 0, abs_floor: float = 0.0) -> GradCheckReport:
    """
    Compare reverse-mode gradients with central differences.

    Args:
        scalar_fn: maps the input list to a single finite value
        inputs: values to differentiate against (flagged requires_grad here)
        eps: finite-difference step
        max_entries: if set, check a seeded random subset of entries per input
        abs_floor: entries where both gradients are below this magnitude count as exact

    Returns:
        Report with the elementwise max relative error, denominator max(|a|, |b|, 1e-8)
    """
    inputs = list(inputs)
    for value in inputs:
        value.data = np.ascontiguousarray(value.data)
        value.requires_grad = True
        value.grad = None
    out = as_value(scalar_fn(inputs))
    if out.size != 1:
        raise ShapeError('grad_check', out.shape, (), 'scalar_fn must return a single value')
    out.backward()

    rng = np.random.default_rng(seed)
    per_input = []
    checked = 0
    for index, value in enumerate(inputs):
        analytic = value.grad if value.grad is not None else np.zeros_like(value.data)
        if not np.all(np.isfinite(analytic)):
            raise NumericsError(f"non-finite gradient for parameter index {index}")
        flat = value.data.reshape(-1)
        analytic_flat = analytic.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        with no_grad():
            for pos in positions:
                original = flat[pos]
                flat[pos] = original + eps
                plus = as_value(scalar_fn(inputs)).item()
                flat[pos] = original - eps
                minus = as_value(scalar_fn(inputs)).item()
                flat[pos] = original
                numeric = (plus - minus) / (2.0 * eps)
                a = analytic_flat[pos]
                if max(abs(a), abs(numeric)) < abs_floor:
                    continue
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        per_input.append(worst)
        checked += len(positions)
    report = GradCheckReport(max(per_input) if per_input else 0.0, per_input, checked)
    logger.debug(f"grad_check over {checked} entries: max relative error {report.max_relative_error:.3e}")
    return report


# ------------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.05
    lr: float = 5e-4
    eps: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[NDValue], grads: Sequence[Optional[np.ndarray]],
               state: OptimState, lr: float) -> Tuple[Sequence[NDValue], OptimState]:
    """One decoupled-weight-decay Adam update, in place on ``params``"""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ShapeError('adamw_step', (len(params),), (len(grads),), 'one gradient per parameter')
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for index, (param, grad) in enumerate(zip(params, grads)):
        grad = np.zeros_like(param.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError('adamw_step', param.shape, grad.shape)
        if not np.all(np.isfinite(grad)):
            raise NumericsError(f"non-finite gradient for parameter index {index}")
        if state.weight_decay and not getattr(param, 'no_decay', False):
            param.data *= 1.0 - lr * state.weight_decay
        m = state.first_moment[index]
        v = state.second_moment[index]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


class AdamW:
    """Stateful wrapper over adamw_step for a named parameter list"""

    def __init__(self, named_params: Sequence[Tuple[str, NDValue]], lr: float,
                 betas: Tuple[float, float] = (0.9, 0.99), weight_decay: float = 0.05,
                 eps: float = 1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.names = [name for name, _ in named_params]
        self.params = [param for _, param in named_params]
        self.state = OptimState(beta1=betas[0], beta2=betas[1], weight_decay=weight_decay,
                                lr=lr, eps=eps)

    def zero_grad(self):
        for param in self.params:
            param.grad = None

    def step(self, lr: Optional[float] = None):
        adamw_step(self.params, [p.grad for p in self.params], self.state,
                   self.state.lr if lr is None else lr)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        tensors = {}
        for name, m, v in zip(self.names, self.state.first_moment, self.state.second_moment):
            tensors[f"optim.m.{name}"] = m
            tensors[f"optim.v.{name}"] = v
        return tensors

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], step: int):
        try:
            self.state.first_moment = [tensors[f"optim.m.{n}"].copy() for n in self.names]
            self.state.second_moment = [tensors[f"optim.v.{n}"].copy() for n in self.names]
        except KeyError as e:
            raise DataError(f"checkpoint is missing optimizer moment {e}") from None
        self.state.step = int(step)


def cosine_lr(step: int, total: int, lr0: float, lr_min: float, warmup: int = 0) -> float:
    """Linear warmup to lr0, then cosine decay to lr_min at ``total``"""
    step = min(max(step, 0), total)
    if warmup > 0 and step < warmup:
        return lr0 * step / warmup
    span = total - warmup
    if span <= 0:
        return lr0
    t = step - warmup
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / span))


# ----------------------------------------------------------------- checkpoints

METADATA_KEY = 'meta_json'


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray], metadata: Dict) -> Path:
    """
    Write an uncompressed npz archive: one little-endian float64 entry per
    tensor plus the JSON metadata under ``meta_json``. The file keeps the
    given suffix.
    """
    if METADATA_KEY in tensors:
        raise ConfigError(f"tensor name '{METADATA_KEY}' is reserved for checkpoint metadata")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.ascontiguousarray(array, dtype='<f8') for name, array in tensors.items()}
    arrays[METADATA_KEY] = np.array(json.dumps(metadata, sort_keys=True))
    with open(path, 'wb') as f:
        np.savez(f, **arrays)
    logger.debug(f"Saved checkpoint with {len(tensors)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            if METADATA_KEY not in archive.files:
                raise DataError(f"{path} has no {METADATA_KEY} entry")
            metadata = json.loads(str(archive[METADATA_KEY]))
            tensors = {name: archive[name].astype(np.float64) for name in archive.files if name != METADATA_KEY}
    except (ValueError, OSError, zipfile.BadZipFile, AttributeError, TypeError) as e:
        raise DataError(f"{path} is not a checkpoint file: {e}") from None
    return tensors, metadata
