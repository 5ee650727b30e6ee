"""Flow-matching math for the joint patch/query latent distribution.

The forward corruption is linear: z_t = (1 - t) z + t eps with t in
[0, 1], so t = 0 is clean data and t = 1 is pure noise. The regression
target is the constant velocity eps - z, and sampling integrates the
learned velocity field backwards from t = 1 to t = 0 with Euler steps
over a time-shifted grid.
"""

from __future__ import annotations

import torch

from .common import ConfigError, LatentPair


def _as_time(t, batch: int, like: torch.Tensor) -> torch.Tensor:
    """Normalize scalar or per-sample t to a (batch,) tensor and check range."""
    tt = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if tt.ndim == 0:
        tt = tt.expand(batch)
    if tt.shape != (batch,):
        raise ValueError(f"t must be scalar or shape ({batch},), got {tuple(tt.shape)}")
    if bool((tt < 0).any()) or bool((tt > 1).any()):
        raise ValueError("t outside the domain [0, 1]")
    return tt


def interpolate(z: LatentPair, eps: LatentPair, t) -> LatentPair:
    """Linear interpolation z_t = (1 - t) z + t eps, elementwise per stream."""
    tt = _as_time(t, z.batch, z.patch)
    w = tt.view(-1, 1, 1)
    return LatentPair(
        (1.0 - w) * z.patch + w * eps.patch,
        (1.0 - w) * z.query + w * eps.query,
    )


def velocity_target(z: LatentPair, eps: LatentPair) -> LatentPair:
    """The regression target eps - z, constant along each interpolation path."""
    return LatentPair(eps.patch - z.patch, eps.query - z.query)


def fm_loss(
    v_pred: LatentPair, z: LatentPair, eps: LatentPair, lambda_query: float = 1.0
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Flow-matching loss: patch MSE plus lambda_query times query MSE.

    Each term is a mean over batch, tokens, and channels of that stream.
    The query term is defined as zero when the query stream is empty.
    """
    target = velocity_target(z, eps)
    loss_patch = (v_pred.patch - target.patch).square().mean()
    if z.n_query > 0:
        loss_query = (v_pred.query - target.query).square().mean()
    else:
        loss_query = loss_patch.new_zeros(())
    total = loss_patch + lambda_query * loss_query
    return total, {"patch": loss_patch, "query": loss_query}


def time_shift(t, alpha: float = 3.0):
    """Warp sampling time toward the noise end: t' = alpha t / (1 + (alpha - 1) t).

    Fixes t = 0 and t = 1, is strictly monotone, and is the identity at
    alpha = 1. Larger alpha spends more integration steps near the data
    end of the path.
    """
    if alpha < 1.0:
        raise ConfigError(f"time shift alpha must be >= 1, got {alpha}")
    tt = torch.as_tensor(t, dtype=torch.float64 if not torch.is_tensor(t) else None)
    if bool((tt < 0).any()) or bool((tt > 1).any()):
        raise ValueError("t outside the domain [0, 1]")
    shifted = alpha * tt / (1.0 + (alpha - 1.0) * tt)
    if torch.is_tensor(t):
        return shifted
    return float(shifted) if shifted.ndim == 0 else shifted


def autoguide(v_weak: LatentPair, v_strong: LatentPair, scale: float) -> LatentPair:
    """Guidance by a weaker model: v = v_weak + scale (v_strong - v_weak).

    scale = 1 returns the strong prediction; scale = 0 the weak one. The
    same scale is applied to both streams.
    """
    return LatentPair(
        v_weak.patch + scale * (v_strong.patch - v_weak.patch),
        v_weak.query + scale * (v_strong.query - v_weak.query),
    )


def euler_sample(
    velocity_fn,
    z_init: LatentPair,
    steps: int,
    alpha: float = 1.0,
) -> LatentPair:
    """Integrate dz/dt = v(z, t) from t = 1 down to t = 0 with Euler steps.

    The grid is a uniform partition of [0, 1] mapped through
    :func:`time_shift`; ``velocity_fn`` is called at the left endpoint of
    each step with a (batch,) time tensor. No projection or clamping is
    applied to the final state.
    """
    if steps < 1:
        raise ConfigError(f"sampler steps must be positive, got {steps}")
    grid = torch.linspace(1.0, 0.0, steps + 1, dtype=z_init.patch.dtype)
    grid = time_shift(grid, alpha)
    z = z_init
    for i in range(steps):
        t_here = grid[i].to(z.patch.dtype)
        dt = (grid[i + 1] - grid[i]).to(z.patch.dtype)
        t_batch = t_here.expand(z.batch).to(z.patch.device)
        v = velocity_fn(z, t_batch)
        z = LatentPair(z.patch + dt * v.patch, z.query + dt * v.query)
    return z


def sample(
    model,
    class_labels: torch.Tensor,
    steps: int | None = None,
    alpha: float | None = None,
    guidance_scale: float = 1.0,
    weak_model=None,
    generator: torch.Generator | None = None,
) -> LatentPair:
    """Draw latents from a trained velocity model.

    ``class_labels`` is a (n,) long tensor; pass ``model.null_class`` for
    unconditional samples. With ``weak_model`` set and
    ``guidance_scale != 1`` the integrated field is the autoguidance
    combination of the two predictions. Results are deterministic for a
    fixed ``generator``.
    """
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    alpha = cfg.alpha if alpha is None else alpha
    n = int(class_labels.shape[0])
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    z0 = LatentPair(
        torch.randn(n, cfg.n_patch, cfg.latent_dim, generator=generator, dtype=dtype).to(device),
        torch.randn(n, cfg.n_query, cfg.latent_dim, generator=generator, dtype=dtype).to(device),
    )
    labels = class_labels.to(device)

    def field(z: LatentPair, t: torch.Tensor) -> LatentPair:
        v = model(z, t, labels)
        if weak_model is not None and guidance_scale != 1.0:
            v_weak = weak_model(z, t, labels)
            v = autoguide(v_weak, v, guidance_scale)
        return v

    with torch.no_grad():
        return euler_sample(field, z0, steps=steps, alpha=alpha)
