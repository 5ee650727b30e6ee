"""Shared types and small helpers used across the package."""

from __future__ import annotations

import dataclasses
import hashlib

import torch
import torch.nn.functional as F


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class ShapeError(ValueError):
    """A tensor has the wrong shape; the message names the offending axis."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the last-good diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclasses.dataclass
class LatentPair:
    """A two-stream latent: per-patch tokens and condensed query tokens.

    ``patch`` is (batch, n_patch, channels) and ``query`` is
    (batch, n_query, channels) with the same batch and channel sizes.
    ``n_query`` may be zero for query-free baselines.
    """

    patch: torch.Tensor
    query: torch.Tensor

    def __post_init__(self):
        if self.patch.ndim != 3:
            raise ShapeError(f"patch stream must be 3d (batch, tokens, channels), got {self.patch.ndim}d")
        if self.query.ndim != 3:
            raise ShapeError(f"query stream must be 3d (batch, tokens, channels), got {self.query.ndim}d")
        if self.patch.shape[0] != self.query.shape[0]:
            raise ShapeError(
                f"batch axis mismatch between streams: {self.patch.shape[0]} vs {self.query.shape[0]}"
            )
        if self.patch.shape[2] != self.query.shape[2]:
            raise ShapeError(
                f"channel axis mismatch between streams: {self.patch.shape[2]} vs {self.query.shape[2]}"
            )

    @property
    def batch(self) -> int:
        return self.patch.shape[0]

    @property
    def n_patch(self) -> int:
        return self.patch.shape[1]

    @property
    def n_query(self) -> int:
        return self.query.shape[1]

    @property
    def channels(self) -> int:
        return self.patch.shape[2]

    def map(self, fn) -> "LatentPair":
        return LatentPair(fn(self.patch), fn(self.query))

    def detach(self) -> "LatentPair":
        return self.map(lambda t: t.detach())

    def clone(self) -> "LatentPair":
        return self.map(lambda t: t.clone())

    def to(self, *args, **kwargs) -> "LatentPair":
        return self.map(lambda t: t.to(*args, **kwargs))


def token_layernorm(tokens: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-token layer normalization without learnable affine terms.

    Each token is centered and scaled to unit variance over its channel
    axis. Used as the final latent normalization of both streams so that
    matched-variance noise can be added afterwards.
    """
    return F.layer_norm(tokens, tokens.shape[-1:], eps=eps)


def generator_for(seed: int, *streams: int) -> torch.Generator:
    """Deterministic generator keyed by a seed plus any number of stream ids.

    Keying every random draw on (seed, step, purpose) makes training runs
    resumable bit-for-bit: no hidden global RNG state needs to survive a
    checkpoint round trip.
    """
    h = hashlib.sha256(("/".join(str(s) for s in (seed, *streams))).encode()).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(h[:8], "little", signed=False) % (2**63))
    return g


def count_params(module: torch.nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
