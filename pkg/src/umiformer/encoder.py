"""Feature extractor: per-view transformer blocks interleaved with inter-view
token rectification, followed by a merger that emits a fixed g x D feature.

Token tensors are batched as (B, n_views, T, D). Neighbour search and
clustering read ``.data`` and are not differentiated; gradients reach tokens
through the gathers that use those indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention, Parameter, TransformerBlock, normal
from .autodiff.tensor import ContractError, Tensor
from .geometry import ClusterAssignment, NeighborIndex, dpc_knn_cluster, inter_view_knn

STRATEGIES = ("fc_mapping", "offset", "offset_weight")
MERGERS = ("pbm", "abm", "stm")
MASK_VALUE = -1e9
# Silhouette patches are mostly all-0 or all-1, so position is the only thing
# telling interior tokens apart; keep it on the scale of the patch projection.
POS_INIT_STD = 2.0


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    ivdb_period: int = 2
    ivdb_once: bool = False
    k: int = 3
    k_dpc: int = 5
    g: int = 16
    rectification_strategy: str = "offset_weight"
    merger: str = "stm"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.ivdb_period < 0:
            raise ContractError("ivdb_period must be >= 0")
        if self.rectification_strategy not in STRATEGIES:
            raise ContractError(f"rectification_strategy must be one of {STRATEGIES}")
        if self.merger not in MERGERS:
            raise ContractError(f"merger must be one of {MERGERS}")
        if self.merger in ("pbm", "abm") and self.tokens_per_view != self.g:
            raise ContractError(f"{self.merger} emits T={self.tokens_per_view} rows; set g equal to it")
        if self.k > self.tokens_per_view:
            raise ContractError(f"k={self.k} exceeds tokens per view {self.tokens_per_view}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens_per_view(self) -> int:
        return self.grid**2

    def ivdb_positions(self) -> list[int]:
        """1-based block numbers after which an inter-view block runs."""
        if self.ivdb_period == 0:
            return []
        positions = list(range(self.ivdb_period, self.depth + 1, self.ivdb_period))
        return positions[:1] if self.ivdb_once else positions


@dataclass
class Trace:
    """Optional recorder for the index structures chosen during a forward pass."""

    neighbors: list[tuple[int, list[NeighborIndex]]] = field(default_factory=list)
    clusters: list[ClusterAssignment] = field(default_factory=list)


class PatchEmbed(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.patch = cfg.patch_size
        self.proj = Linear(cfg.patch_size**2 * cfg.channels, cfg.dim, rng)
        self.pos = Parameter(normal(rng, (cfg.tokens_per_view, cfg.dim), std=POS_INIT_STD))
        self.image_size = cfg.image_size
        self.channels = cfg.channels

    def forward(self, images: Tensor) -> Tensor:
        b, n, h, w, c = images.shape
        if h != self.image_size or w != self.image_size or c != self.channels:
            raise ContractError(
                f"patch_embed: expected images of {self.image_size}x{self.image_size}x{self.channels}, got {h}x{w}x{c}"
            )
        p = self.patch
        x = ops.reshape(images, (b, n, h // p, p, w // p, p, c))
        x = ops.transpose(x, (0, 1, 2, 4, 3, 5, 6))
        x = ops.reshape(x, (b, n, (h // p) * (w // p), p * p * c))
        x = self.proj(x)
        pos = ops.broadcast(ops.reshape(self.pos, (1, 1) + self.pos.shape), x.shape)
        return ops.add(x, pos)


class AttentionFusion(Module):
    """Softmax-weighted set pooling with per-channel scores.

    The scoring map is one linear layer producing a logit per element and
    channel; weights are a softmax over the set axis, taken per channel. The
    per-element scores returned alongside are the channel-mean of the logits.
    """

    def __init__(self, dim: int, rng: np.random.Generator, zero_init: bool = False):
        self.score = Linear(dim, dim, rng, zero_init=zero_init)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
        """Fuse along axis -2 of ``x`` (..., m, D). ``mask`` (..., m) marks real elements."""
        if x.ndim < 2 or x.shape[-2] == 0:
            raise ContractError("attention_fusion: needs a non-empty set")
        logits = self.score(x)
        scores = ops.reduce_mean(logits, axis=-1)
        if mask is not None:
            bias = np.where(np.asarray(mask, dtype=bool), 0.0, MASK_VALUE).astype(x.dtype)
            bias = np.broadcast_to(bias[..., None], x.shape)
            logits = ops.add(logits, Tensor(bias, dtype=x.dtype))
        weights = ops.softmax(logits, axis=-2)
        fused = ops.reduce_sum(ops.mul(weights, x), axis=-2)
        return fused, scores


class IntraViewBlocks(Module):
    """Standard transformer block applied to each view separately."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.block = TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, t, d = x.shape
        y = self.block(ops.reshape(x, (b * n, t, d)))
        return ops.reshape(y, (b, n, t, d))


class IVDB(Module):
    """Rectify each token from its k nearest tokens in every other view."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.dim
        self.k = cfg.k
        self.strategy = cfg.rectification_strategy
        self.edge = MLP(d, d, d, rng)
        self.fusion = AttentionFusion(d, rng)
        if self.strategy == "fc_mapping":
            self.head = Linear(2 * d, d, rng)
        else:
            self.head = MLP(2 * d, d, d, rng, zero_init_last=True)

    def neighbor_indices(self, x: np.ndarray) -> tuple[np.ndarray, list[NeighborIndex]]:
        b, n, t, _ = x.shape
        found = [inter_view_knn(x[i], self.k) for i in range(b)]
        flat = np.stack([nb.flat_indices() + i * n * t for i, nb in enumerate(found)])
        return flat, found

    def related(self, x: Tensor, flat_idx: np.ndarray) -> Tensor:
        """Fused edge features r_i for every anchor, shape (B, n, T, D)."""
        b, n, t, d = x.shape
        m = flat_idx.shape[-1]
        neighbors = ops.gather(ops.reshape(x, (b * n * t, d)), flat_idx, axis=0)
        anchors = ops.broadcast(ops.reshape(x, (b, n, t, 1, d)), (b, n, t, m, d))
        edges = self.edge(ops.sub(neighbors, anchors))
        fused, _ = self.fusion(edges)
        return fused

    def offset(self, x: Tensor, r: Tensor) -> Tensor:
        joint = ops.concat([x, r], axis=-1)
        if self.strategy == "offset":
            return self.head(joint)
        return ops.mul(ops.tanh(self.head(joint)), x)

    def forward(self, x: Tensor, trace: Optional[Trace] = None, stage: int = 0) -> Tensor:
        if x.shape[1] < 2:
            return x
        flat_idx, found = self.neighbor_indices(x.data)
        if trace is not None:
            trace.neighbors.append((stage, found))
        r = self.related(x, flat_idx)
        if self.strategy == "fc_mapping":
            return self.head(ops.concat([x, r], axis=-1))
        return ops.add(x, self.offset(x, r))


class STM(Module):
    """Cluster all tokens into g groups, fuse each group into a query, attend
    back to every token with importance-biased attention, then one transformer
    block."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.dim
        self.g = cfg.g
        self.k_dpc = cfg.k_dpc
        self.heads = cfg.heads
        self.fusion = AttentionFusion(d, rng, zero_init=True)
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rng)
        self.block = TransformerBlock(d, cfg.heads, cfg.mlp_ratio, rng)

    def cluster(self, tokens: np.ndarray) -> list[ClusterAssignment]:
        n_tok = tokens.shape[1]
        if n_tok < self.g:
            raise ContractError(f"stm: {n_tok} tokens cannot form g={self.g} groups")
        k_dpc = min(self.k_dpc, n_tok - 1)
        return [dpc_knn_cluster(tokens[i], k_dpc, self.g) for i in range(tokens.shape[0])]

    def merge(self, x: Tensor, trace: Optional[Trace] = None) -> tuple[Tensor, list[ClusterAssignment]]:
        """Grouped queries after the weighted attention and residual, (B, g, D)."""
        b, n, t, d = x.shape
        n_tok = n * t
        flat = ops.reshape(x, (b, n_tok, d))
        clusters = self.cluster(flat.data)
        sizes = np.stack([c.group_sizes() for c in clusters])
        width = int(sizes.max())
        member_idx = np.zeros((b, self.g, width), dtype=np.int64)
        mask = np.zeros((b, self.g, width), dtype=bool)
        for i, c in enumerate(clusters):
            for grp in range(self.g):
                members = c.members(grp)
                member_idx[i, grp, : len(members)] = members + i * n_tok
                mask[i, grp, : len(members)] = True
        members = ops.gather(ops.reshape(flat, (b * n_tok, d)), member_idx, axis=0)
        queries, _ = self.fusion(members, mask=mask)
        # importance of every token, computed once on the ungrouped set
        importance = ops.reduce_mean(self.fusion.score(flat), axis=-1)
        for i, c in enumerate(clusters):
            c.importance = importance.data[i].astype(np.float64)
        if trace is not None:
            trace.clusters.extend(clusters)
        bias = ops.broadcast(ops.reshape(importance, (b, 1, 1, n_tok)), (b, self.heads, self.g, n_tok))
        attended = self.attn(self.norm_q(queries), self.norm_kv(flat), bias=bias)
        return ops.add(queries, attended), clusters

    def forward(self, x: Tensor, trace: Optional[Trace] = None) -> Tensor:
        z, _ = self.merge(x, trace)
        return self.block(z)


class PBM(Module):
    """Elementwise max over views at each token position."""

    def forward(self, x: Tensor, trace: Optional[Trace] = None) -> Tensor:
        return ops.reduce_max(x, axis=1)


class ABM(Module):
    """Attention fusion across views at each token position."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.fusion = AttentionFusion(cfg.dim, rng)

    def forward(self, x: Tensor, trace: Optional[Trace] = None) -> Tensor:
        fused, _ = self.fusion(ops.transpose(x, (0, 2, 1, 3)))
        return fused


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.blocks = [IntraViewBlocks(cfg, rng) for _ in range(cfg.depth)]
        self.ivdb_after = cfg.ivdb_positions()
        self.ivdbs = [IVDB(cfg, rng) for _ in self.ivdb_after]
        if cfg.merger == "stm":
            self.merger = STM(cfg, rng)
        elif cfg.merger == "abm":
            self.merger = ABM(cfg, rng)
        else:
            self.merger = PBM()
        self.use_ivdb = True

    def tokens(self, images, trace: Optional[Trace] = None) -> Tensor:
        """Token set just before the merger, (B, n, T, D)."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim != 5:
            raise ContractError(f"encoder: images must be (B, n, H, W, C), got {images.shape}")
        if images.shape[1] < 1:
            raise ContractError("encoder: needs at least one view")
        x = self.patch_embed(images)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if self.use_ivdb and i in self.ivdb_after:
                x = self.ivdbs[self.ivdb_after.index(i)](x, trace, stage=i)
        return x

    def forward(self, images, trace: Optional[Trace] = None) -> Tensor:
        return self.merger(self.tokens(images, trace), trace)

    def encode(self, images: np.ndarray) -> np.ndarray:
        """Single sample convenience: (n, H, W, C) -> (g, D) array."""
        return self.forward(Tensor(np.asarray(images)[None])).data[0]
