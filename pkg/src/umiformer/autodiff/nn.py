"""Parameter containers and the standard transformer layers."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import ContractError, Tensor, get_default_dtype

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf tensor. Its name is the dotted attribute path in the owning model."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class: parameters and submodules are discovered from attributes."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if tuple(state[name].shape) != p.shape:
                raise ContractError(f"{name}: stored shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def name_parameters(self) -> None:
        """Stamp every parameter with its dotted path; checks uniqueness."""
        seen: dict[int, str] = {}
        for name, p in self.named_parameters():
            if id(p) in seen:
                raise ContractError(f"parameter shared between {seen[id(p)]} and {name}")
            seen[id(p)] = name
            p.name = name

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(get_default_dtype())


class Linear(Module):
    """x @ W + b with W ~ N(0, 1/d_in) (or zeros), b = 0."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else normal(rng, (d_in, d_out), std=d_in**-0.5)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.add_bias(ops.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        y = ops.layernorm(x, axis=-1)
        g = ops.broadcast(ops.reshape(self.gamma, (1,) * (x.ndim - 1) + (-1,)), x.shape)
        return ops.add_bias(ops.mul(y, g), self.beta)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, zero_init_last: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero_init=zero_init_last)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """softmax(QK^T / sqrt(d_head) + bias) V over the last two axes, per head.

    ``bias`` is optional and must already have the score shape
    (..., heads, n_queries, n_keys).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ContractError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        lead, n, d = x.shape[:-2], x.shape[-2], x.shape[-1]
        h = self.heads
        x = ops.reshape(x, lead + (n, h, d // h))
        k = len(lead)
        return ops.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))

    def scores(self, q_in: Tensor, kv_in: Tensor, bias: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        """Return (attention weights, per-head values)."""
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(kv_in))
        v = self._split(self.wv(kv_in))
        d_head = q.shape[-1]
        kt = ops.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        logits = ops.scalar_mul(ops.matmul(q, kt), 1.0 / math.sqrt(d_head))
        if bias is not None:
            logits = ops.add(logits, bias)
        return ops.softmax(logits, axis=-1), v

    def forward(self, q_in: Tensor, kv_in: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        attn, v = self.scores(q_in, kv_in, bias)
        out = ops.matmul(attn, v)
        k = out.ndim - 3
        out = ops.transpose(out, tuple(range(k)) + (k + 1, k, k + 2))
        out = ops.reshape(out, out.shape[:-2] + (out.shape[-2] * out.shape[-1],))
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = ops.add(x, self.attn(h, h))
        return ops.add(x, self.mlp(self.norm2(x)))
