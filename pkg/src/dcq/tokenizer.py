"""Tokenizer variants built around one pretrained backbone.

Five paradigms share the encode/decode interface:

- ``freeze``: frozen backbone features straight into the decoder.
- ``finetune``: the backbone copy trains end to end with the decoder.
- ``distill``: a fresh student backbone trains with an added MSE pull
  toward the frozen teacher's final features.
- ``feat_concat``: frozen features concatenated channel-wise with a
  small trainable bottleneck branch; each slice is normalized on its
  own so the frozen slice stays exactly invariant under training.
- ``dcq``: frozen features plus detail-condensing queries read from
  intermediate taps, decoded jointly.
"""

from __future__ import annotations

import copy
import dataclasses

import torch
import torch.nn as nn

from .backbone import BackboneConfig, VisionBackbone
from .common import ConfigError, LatentPair, token_layernorm
from .condenser import CondenserConfig, QueryCondenser
from .decoder import DecoderConfig, DualStreamDecoder

VARIANTS = ("freeze", "finetune", "distill", "feat_concat", "dcq")


@dataclasses.dataclass
class TokenizerConfig:
    variant: str = "dcq"
    backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    n_queries: int = 8
    taps: tuple[int, ...] = (0, 3, 6, 9)
    decoder_depth: int = 8
    decoder_dim: int = 384
    decoder_heads: int = 6
    bottleneck_depth: int = 2
    bottleneck_dim: int = 64
    bottleneck_heads: int = 2
    noise_std: float = 0.1
    w_perc: float = 0.5
    w_distill: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.taps = tuple(self.taps)
        for tap in self.taps:
            if not 0 <= tap < self.backbone.depth:
                raise ConfigError(
                    f"tap {tap} out of range for backbone depth {self.backbone.depth}"
                )

    @property
    def latent_dim(self) -> int:
        if self.variant == "feat_concat":
            return self.backbone.dim + self.bottleneck_dim
        return self.backbone.dim

    @property
    def effective_queries(self) -> int:
        return self.n_queries if self.variant == "dcq" else 0

    def condenser_config(self) -> CondenserConfig:
        return CondenserConfig(
            n_queries=self.n_queries,
            taps=self.taps,
            dim=self.backbone.dim,
            heads=self.backbone.heads,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            image_size=self.backbone.image_size,
            patch_size=self.backbone.patch_size,
            latent_dim=self.latent_dim,
            n_queries=self.effective_queries,
            depth=self.decoder_depth,
            dim=self.decoder_dim,
            heads=self.decoder_heads,
            in_channels=self.backbone.in_channels,
        )


class Tokenizer(nn.Module):
    """One encode/decode pair under a chosen variant."""

    def __init__(self, cfg: TokenizerConfig, pretrained: VisionBackbone):
        super().__init__()
        if pretrained.cfg != cfg.backbone:
            raise ConfigError("pretrained backbone config does not match tokenizer config")
        self.cfg = cfg
        self.condenser: QueryCondenser | None = None
        self.teacher: VisionBackbone | None = None
        self.bottleneck: VisionBackbone | None = None

        if cfg.variant == "finetune":
            self.backbone = copy.deepcopy(pretrained)
            self.backbone.requires_grad_(True).train()
        elif cfg.variant == "distill":
            # The student starts fresh; the frozen teacher provides targets.
            self.backbone = VisionBackbone(cfg.backbone)
            self.teacher = copy.deepcopy(pretrained).freeze()
        else:
            self.backbone = copy.deepcopy(pretrained).freeze()

        if cfg.variant == "dcq":
            self.condenser = QueryCondenser(cfg.condenser_config())
        if cfg.variant == "feat_concat":
            self.bottleneck = VisionBackbone(
                BackboneConfig(
                    image_size=cfg.backbone.image_size,
                    patch_size=cfg.backbone.patch_size,
                    depth=cfg.bottleneck_depth,
                    dim=cfg.bottleneck_dim,
                    heads=cfg.bottleneck_heads,
                    in_channels=cfg.backbone.in_channels,
                )
            )
        self.decoder = DualStreamDecoder(cfg.decoder_config())

    def encode_full(
        self,
        images: torch.Tensor,
        train_mode: bool = False,
        generator: torch.Generator | None = None,
    ) -> tuple[LatentPair, dict[str, torch.Tensor]]:
        """Encode images; also return variant-specific extras for losses."""
        cfg = self.cfg
        extras: dict[str, torch.Tensor] = {}
        taps = list(cfg.taps) if self.condenser is not None else []
        final, tap_states = self.backbone.forward_with_taps(images, taps)
        z_patch = token_layernorm(final)
        if cfg.variant == "distill":
            extras["student_final"] = final
            with torch.no_grad():
                extras["teacher_final"] = self.teacher(images)
        if cfg.variant == "feat_concat":
            side = token_layernorm(self.bottleneck(images))
            z_patch = torch.cat([z_patch, side], dim=-1)
        if self.condenser is not None:
            z_query = token_layernorm(self.condenser(tap_states))
        else:
            z_query = z_patch.new_zeros(z_patch.shape[0], 0, z_patch.shape[2])
        if train_mode and cfg.noise_std > 0.0:
            z_patch = z_patch + cfg.noise_std * torch.randn(
                z_patch.shape, generator=generator, dtype=z_patch.dtype
            ).to(z_patch.device)
            if z_query.shape[1] > 0:
                z_query = z_query + cfg.noise_std * torch.randn(
                    z_query.shape, generator=generator, dtype=z_query.dtype
                ).to(z_query.device)
        return LatentPair(z_patch, z_query), extras

    def encode(
        self,
        images: torch.Tensor,
        train_mode: bool = False,
        generator: torch.Generator | None = None,
    ) -> LatentPair:
        z, _ = self.encode_full(images, train_mode=train_mode, generator=generator)
        return z

    def decode(self, z: LatentPair) -> torch.Tensor:
        return self.decoder.decode(z)

    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def train(self, mode: bool = True):
        """Switch trainable submodules; frozen ones stay in eval."""
        super().train(mode)
        if self.cfg.variant not in ("finetune", "distill"):
            self.backbone.eval()
        if self.teacher is not None:
            self.teacher.eval()
        return self


def build_tokenizer(cfg: TokenizerConfig, pretrained: VisionBackbone) -> Tokenizer:
    return Tokenizer(cfg, pretrained)
