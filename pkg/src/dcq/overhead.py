"""Compute and parameter accounting for the tokenizer and generator.

Counts are exact multiply-accumulate (MAC) tallies over the matrix
products of each architecture: attention projections, attention mixes,
and feed-forward layers. Elementwise work (norms, activations,
residuals, softmax normalization) and per-sequence conditioning
projections are excluded, matching the usual transformer-FLOPs
convention. Instrumented frameworks that count one multiply plus one
add report exactly twice these numbers.
"""

from __future__ import annotations

import dataclasses

GIGA = 1e9
MEGA = 1e6


def layer_macs(n_tokens: int, dim: int, ffn_dim: int) -> int:
    """MACs of one self-attention transformer block on n_tokens tokens.

    4 n d^2 for the q/k/v/out projections, 2 n^2 d for the two attention
    matrix products, 2 n d d_ff for the feed-forward pair.
    """
    return 4 * n_tokens * dim * dim + 2 * n_tokens * n_tokens * dim + 2 * n_tokens * dim * ffn_dim


def condenser_macs(n_queries: int, n_patches: int, dim: int, ffn_dim: int) -> int:
    """MACs of one condenser block: K queries reading N patch features.

    Projections cost (2K + 2N) d^2 because queries pass through the
    query and output projections while patches pass through key and
    value; the attention mixes cost 2 K N d; the query feed-forward
    costs 2 K d d_ff.
    """
    return (
        (2 * n_queries + 2 * n_patches) * dim * dim
        + 2 * n_queries * n_patches * dim
        + 2 * n_queries * dim * ffn_dim
    )


def condenser_params(dim: int, ffn_dim: int) -> int:
    """Parameters of one condenser block.

    4 d^2 + 4 d for the biased attention projections, d_ff (2 d + 1) + d
    for the biased feed-forward pair, and 6 d for the three affine layer
    norms (query input, tap features, feed-forward input).
    """
    attn = 4 * (dim * dim + dim)
    ffn = dim * ffn_dim + ffn_dim + ffn_dim * dim + dim
    norms = 3 * 2 * dim
    return attn + ffn + norms


def block_params(dim: int, ffn_dim: int) -> int:
    """Parameters of one self-attention block (two affine norms)."""
    attn = 4 * (dim * dim + dim)
    ffn = dim * ffn_dim + ffn_dim + ffn_dim * dim + dim
    norms = 2 * 2 * dim
    return attn + ffn + norms


@dataclasses.dataclass
class TowerDims:
    depth: int
    n_tokens: int
    dim: int
    ffn_dim: int


@dataclasses.dataclass
class CondenserDims:
    count: int
    n_queries: int
    dim: int
    ffn_dim: int


@dataclasses.dataclass
class GeneratorDims:
    depth: int
    dim: int
    ffn_dim: int
    head_depth: int = 0
    head_dim: int = 0
    head_ffn_dim: int = 0

    @property
    def out_width(self) -> int:
        return self.head_dim if self.head_depth > 0 else self.dim


@dataclasses.dataclass
class ArchConfig:
    encoder: TowerDims
    decoder: TowerDims
    condensers: CondenserDims | None = None
    generator: GeneratorDims | None = None
    latent_dim: int | None = None  # defaults to encoder dim
    steps: int = 50
    patch_values: int | None = None  # patch_size^2 * channels, for embed/head params

    def __post_init__(self):
        if self.latent_dim is None:
            self.latent_dim = self.encoder.dim

    @property
    def n_queries(self) -> int:
        return self.condensers.n_queries if self.condensers else 0


@dataclasses.dataclass
class FlopsReport:
    """Tokenizer compute/parameter accounting, with and without queries."""

    encoder_gmacs: float
    condenser_gmacs: float
    decoder_gmacs: float
    total_gmacs: float
    baseline_total_gmacs: float
    delta_gmacs: float
    overhead_pct: float
    condenser_block_params: int
    added_params: int
    added_params_m: float
    baseline_params: int | None
    added_params_pct: float | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _tower_macs(tower: TowerDims, n_tokens: int | None = None) -> int:
    n = tower.n_tokens if n_tokens is None else n_tokens
    return tower.depth * layer_macs(n, tower.dim, tower.ffn_dim)


def query_support_params(cfg: ArchConfig) -> int:
    """Parameters outside the condenser blocks that exist only for queries:

    the learnable query tokens, the decoder-side query projection, and
    the decoder's learnable query positional table.
    """
    k = cfg.n_queries
    if k == 0:
        return 0
    dec = cfg.decoder.dim
    return k * cfg.condensers.dim + (cfg.latent_dim * dec + dec) + k * dec


def tokenizer_report(cfg: ArchConfig) -> FlopsReport:
    enc_macs = _tower_macs(cfg.encoder)
    k = cfg.n_queries
    if cfg.condensers is not None:
        cond_macs = cfg.condensers.count * condenser_macs(
            k, cfg.encoder.n_tokens, cfg.condensers.dim, cfg.condensers.ffn_dim
        )
        cond_block_params = condenser_params(cfg.condensers.dim, cfg.condensers.ffn_dim)
        added = cfg.condensers.count * cond_block_params + query_support_params(cfg)
    else:
        cond_macs = 0
        cond_block_params = 0
        added = 0
    dec_macs = _tower_macs(cfg.decoder, cfg.decoder.n_tokens + k)
    baseline = enc_macs + _tower_macs(cfg.decoder)
    total = enc_macs + cond_macs + dec_macs

    baseline_params = None
    added_pct = None
    if cfg.patch_values is not None:
        enc_params = cfg.encoder.depth * block_params(cfg.encoder.dim, cfg.encoder.ffn_dim)
        enc_params += cfg.patch_values * cfg.encoder.dim + cfg.encoder.dim
        dec_params = cfg.decoder.depth * block_params(cfg.decoder.dim, cfg.decoder.ffn_dim)
        dec_params += cfg.latent_dim * cfg.decoder.dim + cfg.decoder.dim  # patch projection
        dec_params += cfg.decoder.dim * cfg.patch_values + cfg.patch_values  # pixel head
        dec_params += 2 * cfg.decoder.dim  # final norm
        baseline_params = enc_params + dec_params
        added_pct = 100.0 * added / baseline_params

    return FlopsReport(
        encoder_gmacs=enc_macs / GIGA,
        condenser_gmacs=cond_macs / GIGA,
        decoder_gmacs=dec_macs / GIGA,
        total_gmacs=total / GIGA,
        baseline_total_gmacs=baseline / GIGA,
        delta_gmacs=(total - baseline) / GIGA,
        overhead_pct=100.0 * (total - baseline) / baseline,
        condenser_block_params=cond_block_params,
        added_params=added,
        added_params_m=added / MEGA,
        baseline_params=baseline_params,
        added_params_pct=added_pct,
    )


@dataclasses.dataclass
class GenReport:
    """Generation accounting over a full sampling run plus one decode."""

    per_step_gmacs: float
    per_step_delta_gmacs: float
    decode_gmacs: float
    decode_delta_gmacs: float
    total_gmacs: float
    baseline_total_gmacs: float
    delta_total_gmacs: float
    delta_pct: float
    added_params: int
    added_params_m: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _velocity_macs(cfg: ArchConfig, n_tokens: int) -> int:
    gen = cfg.generator
    body = gen.depth * layer_macs(n_tokens, gen.dim, gen.ffn_dim)
    head = gen.head_depth * layer_macs(n_tokens, gen.head_dim, gen.head_ffn_dim)
    in_proj = n_tokens * cfg.latent_dim * gen.dim
    transition = n_tokens * gen.dim * gen.head_dim if gen.head_depth > 0 else 0
    out_proj = n_tokens * gen.out_width * cfg.latent_dim
    return body + head + in_proj + transition + out_proj


def generator_query_params(cfg: ArchConfig) -> int:
    """Generator parameters that exist only for the query stream:

    its input and output projections and its positional table.
    """
    k = cfg.n_queries
    if k == 0:
        return 0
    gen = cfg.generator
    c = cfg.latent_dim
    return (c * gen.dim + gen.dim) + (gen.out_width * c + c) + k * gen.dim


def generation_report(cfg: ArchConfig) -> GenReport:
    if cfg.generator is None:
        raise ValueError("this architecture has no generator dims")
    n = cfg.encoder.n_tokens
    k = cfg.n_queries
    per_step = _velocity_macs(cfg, n + k)
    per_step_base = _velocity_macs(cfg, n)
    decode = _tower_macs(cfg.decoder, cfg.decoder.n_tokens + k)
    decode_base = _tower_macs(cfg.decoder)
    total = cfg.steps * per_step + decode
    baseline = cfg.steps * per_step_base + decode_base
    return GenReport(
        per_step_gmacs=per_step / GIGA,
        per_step_delta_gmacs=(per_step - per_step_base) / GIGA,
        decode_gmacs=decode / GIGA,
        decode_delta_gmacs=(decode - decode_base) / GIGA,
        total_gmacs=total / GIGA,
        baseline_total_gmacs=baseline / GIGA,
        delta_total_gmacs=(total - baseline) / GIGA,
        delta_pct=100.0 * (total - baseline) / baseline,
        added_params=generator_query_params(cfg),
        added_params_m=generator_query_params(cfg) / MEGA,
    )


def large_preset(n_queries: int = 8, n_condensers: int = 4) -> ArchConfig:
    """Reference-scale preset: ViT-B encoder, 28-layer decoder, wide generator.

    The generator body is 28 transformer layers at width 1152 with a
    2-layer width-2688 prediction head; a linear transition bridges the
    two widths.
    """
    return ArchConfig(
        encoder=TowerDims(depth=12, n_tokens=256, dim=768, ffn_dim=3072),
        decoder=TowerDims(depth=28, n_tokens=257, dim=1152, ffn_dim=4096),
        condensers=CondenserDims(count=n_condensers, n_queries=n_queries, dim=768, ffn_dim=3072)
        if n_queries > 0
        else None,
        generator=GeneratorDims(
            depth=28, dim=1152, ffn_dim=4608, head_depth=2, head_dim=2688, head_ffn_dim=10752
        ),
        latent_dim=768,
        steps=50,
        patch_values=14 * 14 * 3,
    )


def desk_preset(n_queries: int = 8, n_condensers: int = 4) -> ArchConfig:
    """Desk-scale preset matching the default training configuration."""
    return ArchConfig(
        encoder=TowerDims(depth=12, n_tokens=64, dim=192, ffn_dim=768),
        decoder=TowerDims(depth=8, n_tokens=64, dim=384, ffn_dim=1536),
        condensers=CondenserDims(count=n_condensers, n_queries=n_queries, dim=192, ffn_dim=768)
        if n_queries > 0
        else None,
        generator=GeneratorDims(depth=6, dim=256, ffn_dim=1024),
        latent_dim=192,
        steps=50,
        patch_values=8 * 8 * 3,
    )


PRESETS = {"paper-vitb-xl": large_preset, "desk-small": desk_preset}


def format_tokenizer_table(rows: list[tuple[str, FlopsReport]]) -> str:
    """Aligned text table of tokenizer costs, one row per configuration."""
    header = f"{'config':<16} {'enc+cond G':>11} {'dec G':>9} {'total G':>9} {'delta G':>8} {'ovh %':>7} {'added M':>8}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(
            f"{name:<16} {r.encoder_gmacs + r.condenser_gmacs:>11.1f} {r.decoder_gmacs:>9.1f} "
            f"{r.total_gmacs:>9.1f} {r.delta_gmacs:>8.1f} {r.overhead_pct:>7.1f} {r.added_params_m:>8.2f}"
        )
    return "\n".join(lines)


def format_generation_table(rows: list[tuple[str, GenReport]]) -> str:
    header = f"{'config':<16} {'step G':>9} {'d-step G':>9} {'total G':>10} {'d-total G':>10} {'ovh %':>7} {'added M':>8}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(
            f"{name:<16} {r.per_step_gmacs:>9.2f} {r.per_step_delta_gmacs:>9.2f} "
            f"{r.total_gmacs:>10.1f} {r.delta_total_gmacs:>10.1f} {r.delta_pct:>7.2f} {r.added_params_m:>8.2f}"
        )
    return "\n".join(lines)
