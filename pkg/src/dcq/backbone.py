"""Frozen vision-transformer backbone with tappable intermediate features.

The backbone is a plain pre-norm ViT trained briefly on a proxy task and
then frozen. Its role here is to stand in for a large pretrained encoder:
the final block output becomes the patch latent stream, and the inputs to
selected blocks ("taps") are read by query condensers without being
modified. Tap ``l`` is defined as the input to block ``l``, so tap 0 is
the post-patchify state (patch embedding plus positional encoding).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import ConfigError, ShapeError


def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    """1D sin-cos embedding, first half sines, second half cosines."""
    if dim % 2 != 0:
        raise ConfigError(f"1d sincos dim must be even, got {dim}")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    angles = np.outer(positions.astype(np.float64), freqs)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """2D positional embedding for a row-major token grid.

    The first ``dim // 2`` channels embed the row index and the second
    half embed the column index, each with a 1D sin-cos table.
    """
    if dim % 4 != 0:
        raise ConfigError(f"2d sincos dim must be divisible by 4, got {dim}")
    rows = np.repeat(np.arange(grid_h), grid_w)
    cols = np.tile(np.arange(grid_w), grid_h)
    emb = np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)
    return emb.astype(np.float32)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Cut (batch, H, W, ch) images into row-major flattened patches.

    Token ``t`` covers grid cell ``(t // (W/p), t % (W/p))``. Returns
    (batch, n_patches, p * p * ch).
    """
    if images.ndim != 4:
        raise ShapeError(f"images must be 4d (batch, height, width, channels), got {images.ndim}d")
    b, h, w, ch = images.shape
    if h % patch_size != 0:
        raise ShapeError(f"height axis {h} is not divisible by patch size {patch_size}")
    if w % patch_size != 0:
        raise ShapeError(f"width axis {w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, ch)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * ch)


def unpatchify(tokens: torch.Tensor, patch_size: int, grid_h: int, grid_w: int, channels: int = 3) -> torch.Tensor:
    """Inverse of :func:`patchify` for a known grid shape."""
    if tokens.ndim != 3:
        raise ShapeError(f"tokens must be 3d (batch, tokens, values), got {tokens.ndim}d")
    b, n, d = tokens.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"token axis {n} does not match grid {grid_h}x{grid_w}")
    if d != patch_size * patch_size * channels:
        raise ShapeError(f"value axis {d} does not match patch {patch_size}x{patch_size}x{channels}")
    x = tokens.reshape(b, grid_h, grid_w, patch_size, patch_size, channels)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid_h * patch_size, grid_w * patch_size, channels)


class SelfAttention(nn.Module):
    """Multi-head self-attention with explicit per-projection linears."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = torch.matmul(attn, v)
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm residual block: attention then feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x


@dataclasses.dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 12
    dim: int = 192
    heads: int = 3
    ffn_dim: int | None = None  # defaults to 4 * dim
    in_channels: int = 3

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.dim
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        if self.depth < 1:
            raise ConfigError(f"backbone depth must be positive, got {self.depth}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


class VisionBackbone(nn.Module):
    """Stand-in frozen encoder exposing tapped intermediate states.

    ``forward_with_taps`` returns the final block output together with
    the inputs to the requested blocks, in the order the taps were given.
    Reading taps never changes the main path, so the final features are
    identical whether or not anything consumes them.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        patch_values = cfg.patch_size * cfg.patch_size * cfg.in_channels
        self.patch_embed = nn.Linear(patch_values, cfg.dim)
        pe = sincos_2d(cfg.dim, cfg.grid, cfg.grid)
        self.register_buffer("pos_embed", torch.from_numpy(pe).unsqueeze(0), persistent=False)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_dim) for _ in range(cfg.depth)
        )
        self.apply(_init_linear)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[1] != self.cfg.image_size or images.shape[2] != self.cfg.image_size:
            raise ShapeError(
                f"height/width axes {tuple(images.shape[1:3])} do not match configured "
                f"image size {self.cfg.image_size}"
            )
        tokens = patchify(images, self.cfg.patch_size)
        return self.patch_embed(tokens) + self.pos_embed

    def forward_with_taps(
        self, images: torch.Tensor, taps: list[int]
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        for tap in taps:
            if not 0 <= tap < self.cfg.depth:
                raise ConfigError(
                    f"tap {tap} out of range for backbone depth {self.cfg.depth} "
                    f"(valid taps are 0..{self.cfg.depth - 1})"
                )
        x = self.embed(images)
        states: dict[int, torch.Tensor] = {}
        for layer, block in enumerate(self.blocks):
            if layer in taps:
                states[layer] = x
            x = block(x)
        return x, [states[t] for t in taps]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        final, _ = self.forward_with_taps(images, [])
        return final

    def freeze(self) -> "VisionBackbone":
        """Stop gradients and fix normalization statistics; returns self."""
        self.requires_grad_(False)
        self.eval()
        return self

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def _init_linear(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
