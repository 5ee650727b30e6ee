"""Query condensers: cross-attention readers of tapped backbone features.

A small set of learnable query tokens is threaded through one condenser
block per tap. Each block lets the queries read that tap's patch features
through cross-attention (patches act as keys and values only) and then
mixes the queries with a feed-forward layer. Information flows strictly
from patches to queries: the backbone's main path is never written, so
the patch latent stream is bit-identical with or without condensers.
"""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeedForward, VisionBackbone, _init_linear
from .common import ConfigError, LatentPair, ShapeError, token_layernorm


@dataclasses.dataclass
class CondenserConfig:
    n_queries: int = 8
    taps: tuple[int, ...] = (0, 3, 6, 9)
    dim: int = 192
    heads: int = 3
    ffn_dim: int | None = None  # defaults to 4 * dim
    query_init_std: float = 0.02

    def __post_init__(self):
        self.taps = tuple(self.taps)
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.dim
        if self.n_queries < 1:
            raise ConfigError(f"n_queries must be positive, got {self.n_queries}")
        if len(set(self.taps)) != len(self.taps):
            raise ConfigError(f"taps must be distinct, got {self.taps}")
        if any(t < 0 for t in self.taps):
            raise ConfigError(f"taps must be non-negative, got {self.taps}")

    @property
    def n_condensers(self) -> int:
        return len(self.taps)


class CrossAttention(nn.Module):
    """Multi-head cross-attention; queries attend over a patch context.

    Per head: softmax(Q Wq (P Wk)^T / sqrt(d_head)) P Wv, heads
    concatenated and mixed by an output projection. All projections
    carry biases.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"condenser dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if queries.shape[0] != context.shape[0]:
            raise ShapeError(
                f"batch axis mismatch: queries {queries.shape[0]} vs context {context.shape[0]}"
            )
        if queries.shape[2] != context.shape[2]:
            raise ShapeError(
                f"channel axis mismatch: queries {queries.shape[2]} vs context {context.shape[2]}"
            )
        b, k, d = queries.shape
        n = context.shape[1]
        q = self.q(queries).view(b, k, self.heads, self.head_dim).transpose(1, 2)
        kk = self.k(context).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(context).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.matmul(q, kk.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(b, k, d)
        return self.o(out)


class CondenserBlock(nn.Module):
    """One residual condenser: pre-norm cross-attention, then feed-forward.

    Q' = Q + CrossAttn(LN(Q), LN(P));  out = Q' + FFN(LN(Q')).
    The three norms carry learnable affine terms; the tap features P are
    read through a norm of their own but never modified in place.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_p = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, queries: torch.Tensor, tap_state: torch.Tensor) -> torch.Tensor:
        queries = queries + self.attn(self.norm_q(queries), self.norm_p(tap_state))
        queries = queries + self.ffn(self.norm_ffn(queries))
        return queries


class QueryCondenser(nn.Module):
    """Learnable query tokens plus one condenser block per tap."""

    def __init__(self, cfg: CondenserConfig):
        super().__init__()
        self.cfg = cfg
        self.query_tokens = nn.Parameter(torch.empty(cfg.n_queries, cfg.dim))
        self.blocks = nn.ModuleList(
            CondenserBlock(cfg.dim, cfg.heads, cfg.ffn_dim) for _ in range(cfg.n_condensers)
        )
        self.apply(_init_linear)
        nn.init.normal_(self.query_tokens, std=cfg.query_init_std)

    def forward(self, tap_states: list[torch.Tensor]) -> torch.Tensor:
        if len(tap_states) != len(self.blocks):
            raise ShapeError(
                f"got {len(tap_states)} tap states for {len(self.blocks)} condenser blocks"
            )
        batch = tap_states[0].shape[0]
        queries = self.query_tokens.unsqueeze(0).expand(batch, -1, -1)
        for block, state in zip(self.blocks, tap_states):
            queries = block(queries, state)
        return queries


def encode(
    backbone: VisionBackbone,
    condenser: QueryCondenser | None,
    images: torch.Tensor,
    noise_std: float = 0.0,
    generator: torch.Generator | None = None,
) -> LatentPair:
    """Encode images into normalized patch and query latent streams.

    Both streams pass through a per-token layer norm without affine
    terms; when ``noise_std`` is positive the same noise scale is added
    to both streams afterwards, which keeps their signal-to-noise
    matched. With ``condenser=None`` the query stream is empty.
    """
    taps = list(condenser.cfg.taps) if condenser is not None else []
    final, tap_states = backbone.forward_with_taps(images, taps)
    z_patch = token_layernorm(final)
    if condenser is not None:
        z_query = token_layernorm(condenser(tap_states))
    else:
        z_query = z_patch.new_zeros(z_patch.shape[0], 0, z_patch.shape[2])
    if noise_std > 0.0:
        z_patch = z_patch + noise_std * torch.randn(
            z_patch.shape, generator=generator, dtype=z_patch.dtype, device=z_patch.device
        )
        if z_query.shape[1] > 0:
            z_query = z_query + noise_std * torch.randn(
                z_query.shape, generator=generator, dtype=z_query.dtype, device=z_query.device
            )
    return LatentPair(z_patch, z_query)
