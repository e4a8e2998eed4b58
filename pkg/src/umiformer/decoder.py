"""Shape reconstruction: learned queries cross-attend to the compressed
feature, are reshaped into a coarse cube and upsampled to voxel occupancy
probabilities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import LayerNorm, MLP, Module, MultiHeadAttention, Parameter, normal
from .autodiff.tensor import ContractError, Tensor

UPSAMPLE_MODES = ("transposed", "nearest")
DEFAULT_THRESHOLD = 0.5
PLUS_THRESHOLD = 0.4


def _cube_root(n: int) -> int:
    c = round(n ** (1.0 / 3.0))
    return c if c**3 == n else -1


@dataclass
class DecoderConfig:
    query_count: int = 8
    decoder_depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    voxel_size: int = 16
    upsample_stages: int = 3
    channels: tuple[int, ...] = (32, 16, 8)
    upsample_mode: str = "transposed"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        side = _cube_root(self.query_count)
        if side < 1:
            raise ContractError(f"query_count {self.query_count} is not a perfect cube")
        if side * 2**self.upsample_stages != self.voxel_size:
            raise ContractError(
                f"cube_root({self.query_count}) * 2**{self.upsample_stages} = "
                f"{side * 2 ** self.upsample_stages}, expected voxel_size {self.voxel_size}"
            )
        if len(self.channels) != self.upsample_stages:
            raise ContractError(f"need one channel width per upsample stage, got {self.channels}")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ContractError(f"upsample_mode must be one of {UPSAMPLE_MODES}")

    @property
    def base_side(self) -> int:
        return _cube_root(self.query_count)


class DecoderBlock(Module):
    """Pre-norm: self-attention over queries, cross-attention to memory, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng)

    def forward(self, q: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(q)
        q = ops.add(q, self.self_attn(h, h))
        q = ops.add(q, self.cross_attn(self.norm2(q), memory))
        return ops.add(q, self.mlp(self.norm3(q)))


class Conv(Module):
    """Pointwise 3D convolution with bias; He-normal init (or zeros)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero_init: bool = False):
        std = math.sqrt(2.0 / c_in)
        self.weight = Parameter(np.zeros((c_in, c_out)) if zero_init else normal(rng, (c_in, c_out), std=std))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.add_bias(ops.conv3d_pointwise(x, self.weight), self.bias)


class UpStage(Module):
    """Doubles the side of a channel-last volume.

    ``transposed``: a 2x2x2 stride-2 transposed convolution, realized as a
    pointwise conv to 8 * c_out channels followed by depth-to-space.
    ``nearest``: nearest-neighbour upsampling followed by a pointwise conv.
    Both end in a channel LayerNorm and GELU; the normalization keeps the
    logit scale from compounding across stages.
    """

    def __init__(self, c_in: int, c_out: int, mode: str, rng: np.random.Generator):
        self.mode = mode
        self.c_out = c_out
        self.conv = Conv(c_in, 8 * c_out if mode == "transposed" else c_out, rng)
        self.norm = LayerNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "nearest":
            return ops.gelu(self.norm(self.conv(ops.nearest_upsample_3d(x, 2))))
        b, sx, sy, sz, _ = x.shape
        c = self.c_out
        y = self.conv(x)
        y = ops.reshape(y, (b, sx, sy, sz, 2, 2, 2, c))
        y = ops.transpose(y, (0, 1, 4, 2, 5, 3, 6, 7))
        y = ops.reshape(y, (b, 2 * sx, 2 * sy, 2 * sz, c))
        return ops.gelu(self.norm(y))


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.queries = Parameter(normal(rng, (cfg.query_count, cfg.dim)))
        self.memory_norm = LayerNorm(cfg.dim)
        self.blocks = [DecoderBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.decoder_depth)]
        self.norm_out = LayerNorm(cfg.dim)
        widths = (cfg.dim,) + cfg.channels
        self.stages = [UpStage(widths[i], widths[i + 1], cfg.upsample_mode, rng) for i in range(cfg.upsample_stages)]
        self.head = Conv(widths[-1], 1, rng)

    def logits(self, feature: Tensor) -> Tensor:
        if feature.ndim != 3 or feature.shape[-1] != self.cfg.dim:
            raise ContractError(f"decode: feature must be (B, g, {self.cfg.dim}), got {feature.shape}")
        b = feature.shape[0]
        q = ops.broadcast(ops.reshape(self.queries, (1,) + self.queries.shape), (b,) + self.queries.shape)
        memory = self.memory_norm(feature)
        for block in self.blocks:
            q = block(q, memory)
        q = self.norm_out(q)
        c = self.cfg.base_side
        x = ops.reshape(q, (b, c, c, c, self.cfg.dim))
        for stage in self.stages:
            x = stage(x)
        s = self.cfg.voxel_size
        return ops.reshape(self.head(x), (b, s, s, s))

    def forward(self, feature: Tensor) -> Tensor:
        """Occupancy probabilities (B, S, S, S)."""
        return ops.sigmoid(self.logits(feature))

    def decode(self, feature: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(np.asarray(feature)[None])).data[0]


def binarize(probs: np.ndarray, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where probability > t (strict), else 0."""
    if not 0.0 < t < 1.0:
        raise ContractError(f"threshold {t} must lie in (0, 1)")
    return (np.asarray(probs) > t).astype(np.uint8)
