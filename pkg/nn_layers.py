"""
Layer library shared by the micro encoder, the macro encoder and the probes.

Layers are plain classes holding Parameters; ``Module.named_parameters``
walks attributes in definition order so parameter paths (and therefore
checkpoints) are stable across runs. Every initializer takes an explicit
``numpy.random.Generator``.
"""
import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

import numerics_core as nc
from errors import ConfigError, DataError, ShapeError
from numerics_core import NDValue, Parameter

logger = logging.getLogger(__name__)

MASK_BIAS = -1e9


class Module:
    """Base class: parameter traversal, state dicts and freezing"""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _walk(self, prefix: str, seen: set) -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk_value(f"{prefix}{name}", value, seen)

    def named_parameters(self, prefix: str = '') -> List[Tuple[str, Parameter]]:
        """Ordered (dotted path, Parameter) pairs; shared parameters appear once"""
        return list(self._walk(prefix, set()))

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = '') -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, tensors: Dict[str, np.ndarray], prefix: str = ''):
        for name, param in self.named_parameters(prefix):
            if name not in tensors:
                raise DataError(f"Missing parameter '{name}' in state")
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != param.shape:
                raise DataError(f"Parameter '{name}' has shape {value.shape}, expected {param.shape}")
            param.data = value.copy()

    def freeze(self):
        for param in self.parameters():
            param.requires_grad = False
            param.grad = None

    def unfreeze(self):
        for param in self.parameters():
            param.requires_grad = True

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _walk_value(path: str, value, seen: set) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield path, value
    elif isinstance(value, Module):
        if id(value) not in seen:
            seen.add(id(value))
            yield from value._walk(path + '.', seen)
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            yield from _walk_value(f"{path}.{index}", item, seen)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_value(f"{path}.{key}", item, seen)


def init_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Normal init with variance 1 / fan_in"""
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)


class Linear(Module):
    """y = x @ W + b over the last axis"""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        shape = (in_dim, out_dim)
        self.weight = Parameter(np.zeros(shape) if zero_init else init_normal(rng, shape, in_dim))
        self.bias = Parameter(np.zeros(out_dim), no_decay=True) if bias else None

    def forward(self, x: NDValue) -> NDValue:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError('linear', x.shape, self.weight.shape)
        y = nc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class RMSNorm(Module):

    def __init__(self, dim: int, eps: float = 1e-8):
        self.weight = Parameter(np.ones(dim), no_decay=True)
        self.eps = eps

    def forward(self, x: NDValue) -> NDValue:
        return nc.rms_norm(x, self.weight, self.eps)


class Conv1d(Module):
    """Valid 1-D convolution over [N, C, L] inputs"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, groups: int = 1, bias: bool = True):
        if in_channels % groups or out_channels % groups:
            raise ConfigError(f"groups={groups} must divide {in_channels} and {out_channels} channels")
        fan_in = (in_channels // groups) * kernel
        self.weight = Parameter(init_normal(rng, (out_channels, in_channels // groups, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels), no_decay=True) if bias else None
        self.stride = stride
        self.groups = groups

    def forward(self, x: NDValue) -> NDValue:
        return nc.conv1d(x, self.weight, self.bias, stride=self.stride, groups=self.groups)


class ChannelRMSNorm(RMSNorm):
    """RMSNorm across the channel axis of an [N, C, L] tensor"""

    def forward(self, x: NDValue) -> NDValue:
        x = nc.swapaxes(x, 1, 2)
        return nc.swapaxes(nc.rms_norm(x, self.weight, self.eps), 1, 2)


class ConvNormGELU(Module):

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator):
        self.conv = Conv1d(in_channels, out_channels, kernel, rng, stride=stride)
        self.norm = ChannelRMSNorm(out_channels)

    def forward(self, x: NDValue) -> NDValue:
        return nc.gelu(self.norm(self.conv(x)))


class SwiGLU(Module):

    def __init__(self, dim: int, rng: np.random.Generator, hidden: Optional[int] = None):
        hidden = hidden or 2 * dim
        self.gate = Linear(dim, hidden, rng, bias=False)
        self.up = Linear(dim, hidden, rng, bias=False)
        self.down = Linear(hidden, dim, rng, bias=False)

    def forward(self, x: NDValue) -> NDValue:
        return self.down(nc.silu(self.gate(x)) * self.up(x))


class RotaryEmbedding:
    """Rotary position encoding on the last axis (half-split rotation)"""

    def __init__(self, head_dim: int, base: float = 10000.0):
        if head_dim % 2:
            raise ConfigError(f"rotary embedding needs an even head dim, got {head_dim}")
        self.head_dim = head_dim
        self.inv_freq = 1.0 / (base ** (np.arange(0, head_dim, 2) / head_dim))

    def angles(self, positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(positions, dtype=np.float64)[..., None] * self.inv_freq
        return np.cos(theta), np.sin(theta)

    def apply(self, x: NDValue, positions: np.ndarray) -> NDValue:
        """
        Args:
            x: [B, H, T, head_dim]
            positions: [T] shared or [B, T] per-sample positions
        """
        cos, sin = self.angles(positions)
        if cos.ndim == 3:
            cos, sin = cos[:, None], sin[:, None]
        half = self.head_dim // 2
        x1 = x[:, :, :, :half]
        x2 = x[:, :, :, half:]
        return nc.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


class MultiHeadAttention(Module):
    """Self- or cross-attention; ``key_mask`` [B, S] marks keys that may be attended"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, rotary: bool = True):
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide model dim {dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.rotary = RotaryEmbedding(self.head_dim) if rotary else None
        self.q = Linear(dim, dim, rng, bias=False)
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng, bias=False)
        self.out = Linear(dim, dim, rng, bias=False)

    def _split(self, x: NDValue) -> NDValue:
        b, t, _ = x.shape
        return nc.transpose(x.reshape(b, t, self.heads, self.head_dim), (0, 2, 1, 3))

    def forward(self, x: NDValue, context: Optional[NDValue] = None,
                key_mask: Optional[np.ndarray] = None,
                positions: Optional[np.ndarray] = None,
                context_positions: Optional[np.ndarray] = None) -> NDValue:
        """
        Args:
            x: [B, T, dim] queries
            context: [B, S, dim] keys and values; ``x`` when omitted
            key_mask: [B, S] True where a key may be attended
            positions: rotary positions of the queries
            context_positions: rotary positions of the context keys

        Returns:
            [B, T, dim] attention output

        Raises:
            ShapeError: if ``key_mask`` does not match [B, S]
        """
        context = x if context is None else context
        b, t, d = x.shape
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        if self.rotary is not None:
            q_pos = np.arange(t) if positions is None else positions
            k_pos = q_pos if context is x else (np.arange(context.shape[1]) if context_positions is None
                                                else context_positions)
            q = self.rotary.apply(q, q_pos)
            k = self.rotary.apply(k, k_pos)
        scores = nc.matmul(q, nc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.head_dim))
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if key_mask.shape != (b, context.shape[1]):
                raise ShapeError('attention key mask', key_mask.shape, (b, context.shape[1]))
            scores = scores + np.where(key_mask, 0.0, MASK_BIAS)[:, None, None, :]
        weights = nc.softmax(scores, axis=-1)
        mixed = nc.transpose(nc.matmul(weights, v), (0, 2, 1, 3)).reshape(b, t, d)
        return self.out(mixed)


class TransformerBlock(Module):
    """Pre-norm attention block with a SwiGLU feed-forward"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 hidden: Optional[int] = None, rotary: bool = True):
        self.attn_norm = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, rotary=rotary)
        self.ffn_norm = RMSNorm(dim)
        self.ffn = SwiGLU(dim, rng, hidden)

    def forward(self, x: NDValue, key_mask: Optional[np.ndarray] = None,
                positions: Optional[np.ndarray] = None) -> NDValue:
        x = x + self.attn(self.attn_norm(x), key_mask=key_mask, positions=positions)
        return x + self.ffn(self.ffn_norm(x))


class CrossAttentionBlock(Module):
    """Queries from ``x``, keys and values from ``context``"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, hidden: Optional[int] = None):
        self.query_norm = RMSNorm(dim)
        self.context_norm = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, rotary=False)
        self.ffn_norm = RMSNorm(dim)
        self.ffn = SwiGLU(dim, rng, hidden)

    def forward(self, x: NDValue, context: NDValue) -> NDValue:
        x = x + self.attn(self.query_norm(x), context=self.context_norm(context))
        return x + self.ffn(self.ffn_norm(x))


class MoEFeedForward(Module):
    """
    Top-k routed mixture of SwiGLU experts.

    Gates are a softmax over the selected logits only; unselected experts
    get no gradient. ``last_routing`` holds the dense [tokens, experts]
    gate matrix of the latest call.
    """

    def __init__(self, dim: int, rng: np.random.Generator, num_experts: int = 4,
                 top_k: int = 2, hidden: Optional[int] = None):
        if not 1 <= top_k <= num_experts:
            raise ConfigError(f"activated experts ({top_k}) must be in [1, {num_experts}]")
        self.top_k = top_k
        self.router = Linear(dim, num_experts, rng, bias=False)
        self.experts = [SwiGLU(dim, rng, hidden) for _ in range(num_experts)]
        self.last_routing: Optional[np.ndarray] = None

    def forward(self, x: NDValue) -> NDValue:
        """
        Args:
            x: [..., dim] tokens

        Returns:
            Gate-weighted sum of the selected experts, same shape as ``x``
        """
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        n = flat.shape[0]
        logits = self.router(flat)
        order = np.argsort(-logits.data, axis=1, kind='stable')[:, :self.top_k]
        gates = nc.softmax(logits[np.arange(n)[:, None], order], axis=-1)

        routing = np.zeros(logits.shape)
        routing[np.arange(n)[:, None], order] = gates.data
        self.last_routing = routing

        total = None
        for expert_index, expert in enumerate(self.experts):
            rows, slots = np.nonzero(order == expert_index)
            if rows.size == 0:
                continue
            weight = gates[rows, slots].reshape(-1, 1)
            contribution = nc.scatter_add(expert(flat[rows]) * weight, rows, n)
            total = contribution if total is None else total + contribution
        return total.reshape(shape)


class MoETransformerBlock(Module):

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, num_experts: int = 4,
                 top_k: int = 2, hidden: Optional[int] = None):
        self.attn_norm = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, rotary=True)
        self.ffn_norm = RMSNorm(dim)
        self.moe = MoEFeedForward(dim, rng, num_experts, top_k, hidden)

    def forward(self, x: NDValue, positions: Optional[np.ndarray] = None,
                key_mask: Optional[np.ndarray] = None) -> NDValue:
        x = x + self.attn(self.attn_norm(x), key_mask=key_mask, positions=positions)
        return x + self.moe(self.ffn_norm(x))
