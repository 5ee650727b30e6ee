"""Joint velocity model over the two latent streams.

A DiT-style transformer denoises patch and query tokens as one sequence.
Each stream has its own input and output projection; conditioning on time
and class enters through adaptive layer norm in every block. An optional
prediction head of a different width can be stacked on top of the body,
connected by a linear transition; it is disabled by default.
"""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SelfAttention, FeedForward, sincos_2d, sincos_1d
from .common import ConfigError, LatentPair, ShapeError

import numpy as np


@dataclasses.dataclass
class GenConfig:
    n_patch: int = 64
    n_query: int = 8
    latent_dim: int = 192
    depth: int = 6
    dim: int = 256
    heads: int = 4
    ffn_dim: int | None = None  # defaults to 4 * dim
    head_depth: int = 0
    head_dim: int | None = None
    head_ffn_dim: int | None = None
    class_count: int = 6
    label_drop: float = 0.1
    time_freq_dim: int = 128
    lambda_query: float = 1.0
    steps: int = 50
    alpha: float = 3.0
    guidance_scale: float = 1.6
    sigma_aug: float = 0.1

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.dim
        if self.head_depth > 0:
            if self.head_dim is None:
                self.head_dim = 2 * self.dim
            if self.head_ffn_dim is None:
                self.head_ffn_dim = 4 * self.head_dim
        if self.class_count < 1:
            raise ConfigError(f"class_count must be positive, got {self.class_count}")
        if not 0.0 <= self.label_drop < 1.0:
            raise ConfigError(f"label_drop must be in [0, 1), got {self.label_drop}")
        if self.time_freq_dim % 2 != 0:
            raise ConfigError(f"time_freq_dim must be even, got {self.time_freq_dim}")

    @property
    def out_width(self) -> int:
        return self.head_dim if self.head_depth > 0 else self.dim


class GaussianFourierTime(nn.Module):
    """Random-frequency Fourier features of t followed by a small MLP."""

    def __init__(self, freq_dim: int, dim: int):
        super().__init__()
        # Frequencies are drawn once and stored in the checkpoint.
        self.register_buffer("freqs", torch.randn(freq_dim // 2))
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = 2.0 * math.pi * t.to(self.freqs.dtype)[:, None] * self.freqs[None, :]
        feats = torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)
        return self.mlp(feats.to(t.dtype))


class AdaLNBlock(nn.Module):
    """Transformer block with shift/scale/gate modulation from conditioning."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.ffn = FeedForward(dim, ffn_dim)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 6 * dim))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(cond)[:, None, :].chunk(
            6, dim=-1
        )
        x = x + gate1 * self.attn(self.norm1(x) * (1 + scale1) + shift1)
        x = x + gate2 * self.ffn(self.norm2(x) * (1 + scale2) + shift2)
        return x


class JointVelocityModel(nn.Module):
    def __init__(self, cfg: GenConfig):
        super().__init__()
        self.cfg = cfg
        grid = int(round(math.sqrt(cfg.n_patch)))
        if grid * grid == cfg.n_patch and cfg.dim % 4 == 0:
            pe = sincos_2d(cfg.dim, grid, grid)
        else:
            pe = sincos_1d(cfg.dim, np.arange(cfg.n_patch)).astype(np.float32)
        self.register_buffer("patch_pos", torch.from_numpy(pe).unsqueeze(0), persistent=False)
        self.patch_in = nn.Linear(cfg.latent_dim, cfg.dim)
        # Query-stream layers exist only when queries do, keeping the
        # query-free baseline free of dead parameters.
        if cfg.n_query > 0:
            self.query_pos = nn.Parameter(torch.zeros(cfg.n_query, cfg.dim))
            self.query_in = nn.Linear(cfg.latent_dim, cfg.dim)
        else:
            self.query_pos = None
            self.query_in = None
        self.time_embed = GaussianFourierTime(cfg.time_freq_dim, cfg.dim)
        # One extra embedding row serves as the null class for label drop.
        self.class_embed = nn.Embedding(cfg.class_count + 1, cfg.dim)
        self.blocks = nn.ModuleList(
            AdaLNBlock(cfg.dim, cfg.heads, cfg.ffn_dim, cfg.dim) for _ in range(cfg.depth)
        )
        if cfg.head_depth > 0:
            self.transition = nn.Linear(cfg.dim, cfg.head_dim)
            self.head_blocks = nn.ModuleList(
                AdaLNBlock(cfg.head_dim, cfg.heads, cfg.head_ffn_dim, cfg.dim)
                for _ in range(cfg.head_depth)
            )
        else:
            self.transition = None
            self.head_blocks = nn.ModuleList()
        self.norm_out = nn.LayerNorm(cfg.out_width, elementwise_affine=False)
        self.out_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cfg.dim, 2 * cfg.out_width))
        self.patch_out = nn.Linear(cfg.out_width, cfg.latent_dim)
        self.query_out = nn.Linear(cfg.out_width, cfg.latent_dim) if cfg.n_query > 0 else None
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.normal_(self.class_embed.weight, std=0.02)
        if self.query_pos is not None:
            nn.init.normal_(self.query_pos, std=0.02)
        for block in list(self.blocks) + list(self.head_blocks):
            nn.init.zeros_(block.modulation[1].weight)
            nn.init.zeros_(block.modulation[1].bias)
        # Zero-initialized outputs make the initial velocity field zero.
        nn.init.zeros_(self.out_modulation[1].weight)
        nn.init.zeros_(self.out_modulation[1].bias)
        nn.init.zeros_(self.patch_out.weight)
        nn.init.zeros_(self.patch_out.bias)
        if self.query_out is not None:
            nn.init.zeros_(self.query_out.weight)
            nn.init.zeros_(self.query_out.bias)

    @property
    def null_class(self) -> int:
        return self.cfg.class_count

    def predict_velocity(
        self, z: LatentPair, t: torch.Tensor, class_labels: torch.Tensor | None = None
    ) -> LatentPair:
        cfg = self.cfg
        if z.n_patch != cfg.n_patch:
            raise ShapeError(f"patch token axis {z.n_patch} does not match model n_patch {cfg.n_patch}")
        if z.n_query != cfg.n_query:
            raise ShapeError(f"query token axis {z.n_query} does not match model n_query {cfg.n_query}")
        if z.channels != cfg.latent_dim:
            raise ShapeError(f"channel axis {z.channels} does not match model latent_dim {cfg.latent_dim}")
        if class_labels is None:
            class_labels = torch.full((z.batch,), self.null_class, dtype=torch.long, device=z.patch.device)
        if class_labels.shape != (z.batch,):
            raise ShapeError(f"class_labels must be shape ({z.batch},), got {tuple(class_labels.shape)}")
        if bool((class_labels < 0).any()) or bool((class_labels > self.null_class).any()):
            raise ValueError(
                f"class label out of range: valid labels are 0..{cfg.class_count - 1} "
                f"plus {self.null_class} for the null class"
            )
        cond = self.time_embed(t) + self.class_embed(class_labels)
        h = self.patch_in(z.patch) + self.patch_pos
        if cfg.n_query > 0:
            h = torch.cat([h, self.query_in(z.query) + self.query_pos.unsqueeze(0)], dim=1)
        for block in self.blocks:
            h = block(h, cond)
        if self.transition is not None:
            h = self.transition(h)
            for block in self.head_blocks:
                h = block(h, cond)
        shift, scale = self.out_modulation(cond)[:, None, :].chunk(2, dim=-1)
        h = self.norm_out(h) * (1 + scale) + shift
        v_patch = self.patch_out(h[:, : cfg.n_patch])
        if cfg.n_query > 0:
            v_query = self.query_out(h[:, cfg.n_patch :])
        else:
            v_query = v_patch.new_zeros(z.batch, 0, cfg.latent_dim)
        return LatentPair(v_patch, v_query)

    def forward(
        self, z: LatentPair, t: torch.Tensor, class_labels: torch.Tensor | None = None
    ) -> LatentPair:
        return self.predict_velocity(z, t, class_labels)
