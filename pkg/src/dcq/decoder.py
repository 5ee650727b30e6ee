"""Dual-stream reconstruction decoder.

The decoder projects both latent streams into its own width, adds a fixed
2D sin-cos positional embedding to patch tokens and a learnable embedding
table to query tokens, concatenates the streams into one sequence, and
runs standard self-attention blocks over the whole thing. Pixels are read
only from the patch positions, but attention lets those positions pull
detail out of the query tokens.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn as nn

from .backbone import TransformerBlock, _init_linear, sincos_2d, unpatchify
from .common import ConfigError, LatentPair, ShapeError


@dataclasses.dataclass
class DecoderConfig:
    image_size: int = 64
    patch_size: int = 8
    latent_dim: int = 192
    n_queries: int = 8
    depth: int = 8
    dim: int = 384
    heads: int = 6
    ffn_dim: int | None = None  # defaults to 4 * dim
    in_channels: int = 3

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.dim
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        if self.n_queries < 0:
            raise ConfigError(f"n_queries must be non-negative, got {self.n_queries}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


class DualStreamDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.latent_dim, cfg.dim)
        pe = sincos_2d(cfg.dim, cfg.grid, cfg.grid)
        self.register_buffer("pos_embed", torch.from_numpy(pe).unsqueeze(0), persistent=False)
        # The query pathway exists only when there are query tokens, so a
        # query-free baseline decoder carries no dead parameters.
        if cfg.n_queries > 0:
            self.query_proj = nn.Linear(cfg.latent_dim, cfg.dim)
            self.query_pos = nn.Parameter(torch.empty(cfg.n_queries, cfg.dim))
        else:
            self.query_proj = None
            self.query_pos = None
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_dim) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.pixel_head = nn.Linear(cfg.dim, cfg.patch_size * cfg.patch_size * cfg.in_channels)
        self.apply(_init_linear)
        if self.query_pos is not None:
            nn.init.normal_(self.query_pos, std=0.02)

    def assemble_sequence(self, z: LatentPair) -> torch.Tensor:
        """Project both streams to decoder width and concatenate them.

        Patch tokens come first (row-major grid order with the 2D sin-cos
        embedding added), query tokens follow with their learnable
        positional table.
        """
        cfg = self.cfg
        if z.n_patch != cfg.n_patches:
            raise ShapeError(
                f"patch token axis {z.n_patch} does not match decoder grid "
                f"{cfg.grid}x{cfg.grid} ({cfg.n_patches} tokens)"
            )
        if z.n_query != cfg.n_queries:
            raise ShapeError(
                f"query token axis {z.n_query} does not match decoder n_queries {cfg.n_queries}"
            )
        if z.channels != cfg.latent_dim:
            raise ShapeError(
                f"channel axis {z.channels} does not match decoder latent_dim {cfg.latent_dim}"
            )
        h_patch = self.patch_proj(z.patch) + self.pos_embed
        if cfg.n_queries == 0:
            return h_patch
        h_query = self.query_proj(z.query) + self.query_pos.unsqueeze(0)
        return torch.cat([h_patch, h_query], dim=1)

    def decode(self, z: LatentPair) -> torch.Tensor:
        """Reconstruct (batch, H, W, ch) pixels from a latent pair.

        Output pixels are unconstrained reals; targets live in [-1, 1].
        """
        x = self.assemble_sequence(z)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x[:, : self.cfg.n_patches])
        patches = self.pixel_head(x)
        return unpatchify(
            patches, self.cfg.patch_size, self.cfg.grid, self.cfg.grid, self.cfg.in_channels
        )

    def forward(self, z: LatentPair) -> torch.Tensor:
        return self.decode(z)
