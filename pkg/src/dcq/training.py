"""Training loops: backbone proxy pretraining, tokenizers, and the generator.

All loops share the same conventions: AdamW at a constant learning rate,
gradient-norm clipping at 1.0, an EMA shadow of trainable parameters,
JSONL step logs, periodic held-out evaluation, and a hard abort with
diagnostics the moment any loss component turns non-finite. Every random
draw is keyed on (seed, purpose, step), so resuming from a checkpoint
replays the exact remaining schedule.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import LatentPair, TrainingDiverged, generator_for
from .data import batch_at, channel_permutation, stack_items
from .flow import fm_loss, interpolate
from .losses import ConvFeatures, distill_loss, recon_loss
from .metrics import psnr
from .tokenizer import Tokenizer


@dataclasses.dataclass
class TrainSchedule:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ema_decay: float = 0.9999
    eval_every: int | None = None  # defaults to steps // 20
    checkpoint_every: int | None = None  # defaults to eval_every
    seed: int = 0

    def __post_init__(self):
        if self.eval_every is None:
            self.eval_every = max(1, self.steps // 20)
        if self.checkpoint_every is None:
            self.checkpoint_every = self.eval_every


class EMA:
    """Exponential moving average of a module's trainable parameters."""

    def __init__(self, module: nn.Module, decay: float = 0.9999):
        self.decay = decay
        self.shadow = {
            name: p.detach().clone()
            for name, p in module.named_parameters()
            if p.requires_grad
        }

    @torch.no_grad()
    def update(self, module: nn.Module):
        for name, p in module.named_parameters():
            if name in self.shadow:
                self.shadow[name].lerp_(p.detach(), 1.0 - self.decay)

    def state_dict(self) -> dict:
        return {"decay": self.decay, "shadow": self.shadow}

    def load_state_dict(self, state: dict):
        self.decay = state["decay"]
        self.shadow = state["shadow"]


class RunLog:
    """JSONL metric log; buffered in memory and optionally mirrored to disk."""

    def __init__(self, path: Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record):
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def _check_finite(parts: dict[str, float], step: int, lr: float, last_good: dict):
    for name, value in parts.items():
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss component {name!r}={value} at step {step} (lr={lr}); "
                f"last good components: {last_good}",
                diagnostics={"step": step, "lr": lr, "component": name, "last_good": dict(last_good)},
            )


def pretrain_backbone(
    backbone,
    dataset,
    train_indices,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    color_jitter: bool = True,
    invariance_weight: float = 0.0,
    log: RunLog | None = None,
):
    """Brief classification proxy pretraining, then freeze.

    Mean-pooled final features feed a temporary linear head trained on
    the dataset labels under random channel-permutation jitter. With
    ``invariance_weight > 0`` an extra consistency term pulls the final
    features of a jittered view toward those of the clean view, which
    actively drains color information out of the deep features — the
    same reason large augmentation-invariant encoders are lossy about
    low-level detail — while the early patch embedding keeps it.
    Returns the frozen backbone; the head is discarded.
    """
    head = nn.Linear(backbone.cfg.dim, dataset.class_count)
    opt = torch.optim.AdamW(list(backbone.parameters()) + list(head.parameters()), lr=lr)
    log = log or RunLog()
    last_good: dict[str, float] = {}
    for step in range(steps):
        images, labels = batch_at(dataset, train_indices, batch_size, seed, step)
        views = channel_permutation(images, seed, step) if color_jitter else images
        final = backbone(views)
        logits = head(final.mean(dim=1))
        loss = F.cross_entropy(logits, labels)
        parts = {"xent": loss.item()}
        if invariance_weight > 0.0:
            with torch.no_grad():
                clean = backbone(images)
                # Scale by the image-driven feature variance (variance over the
                # batch excludes the shared positional component) so the term
                # measures the fraction of feature variation that is
                # jitter-sensitive rather than an absolute magnitude.
                scale = clean.var(dim=0).mean().clamp_min(1e-8)
            inv = (final - clean).square().mean() / scale
            loss = loss + invariance_weight * inv
            parts["invariance"] = inv.item()
        _check_finite(parts, step, lr, last_good)
        last_good = parts
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(backbone.parameters(), 1.0)
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            acc = (logits.argmax(dim=-1) == labels).float().mean().item()
            log.write(stage="pretrain", step=step, acc=acc, **parts)
    return backbone.freeze()


@dataclasses.dataclass
class TrainResult:
    final_loss: float
    final_components: dict
    val_psnr: float | None
    history: list


def _tokenizer_loss(
    tok: Tokenizer,
    images: torch.Tensor,
    perceptual: ConvFeatures | None,
    noise_generator: torch.Generator | None,
) -> tuple[torch.Tensor, dict[str, float]]:
    z, extras = tok.encode_full(images, train_mode=True, generator=noise_generator)
    pred = tok.decode(z)
    loss, parts = recon_loss(pred, images, perceptual, tok.cfg.w_perc)
    out = {"l1": parts["l1"].item(), "perceptual": parts["perceptual"].item()}
    if tok.cfg.variant == "distill":
        d = distill_loss(extras["student_final"], extras["teacher_final"])
        loss = loss + tok.cfg.w_distill * d
        out["distill"] = d.item()
    out["total"] = loss.item()
    return loss, out


@torch.no_grad()
def eval_tokenizer_psnr(tok: Tokenizer, dataset, indices, max_images: int = 64) -> float:
    tok.eval()
    images, _ = stack_items(dataset, indices[:max_images])
    pred = tok.reconstruct(images)
    return psnr(pred, images)


def train_tokenizer(
    tok: Tokenizer,
    dataset,
    train_indices,
    val_indices,
    schedule: TrainSchedule,
    perceptual: ConvFeatures | None = None,
    log: RunLog | None = None,
    run_dir: Path | None = None,
    resume: dict | None = None,
) -> TrainResult:
    """Train one tokenizer variant; returns the final loss and val PSNR.

    ``resume`` is a checkpoint payload from :mod:`dcq.checkpoints`; the
    loop continues from its step with optimizer and EMA state restored.
    """
    log = log or RunLog()
    params = tok.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=schedule.lr, weight_decay=schedule.weight_decay)
    ema = EMA(tok, decay=schedule.ema_decay)
    start_step = 0
    if resume is not None:
        tok.load_state_dict(resume["model"])
        opt.load_state_dict(resume["optimizer"])
        ema.load_state_dict(resume["ema"])
        start_step = resume["step"]
    tok.train()
    last_good: dict[str, float] = {}
    final_parts: dict[str, float] = {}
    val_psnr = None
    for step in range(start_step, schedule.steps):
        images, _ = batch_at(dataset, train_indices, schedule.batch_size, schedule.seed, step)
        loss, parts = _tokenizer_loss(
            tok, images, perceptual, generator_for(schedule.seed, "noise", step)
        )
        _check_finite(parts, step, schedule.lr, last_good)
        last_good = parts
        final_parts = parts
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, schedule.grad_clip)
        opt.step()
        ema.update(tok)
        if (step + 1) % schedule.eval_every == 0 or step == schedule.steps - 1:
            val_psnr = eval_tokenizer_psnr(tok, dataset, val_indices)
            tok.train()
            log.write(stage="tokenizer", step=step, val_psnr=val_psnr, **parts)
        if run_dir is not None and (
            (step + 1) % schedule.checkpoint_every == 0 or step == schedule.steps - 1
        ):
            from .checkpoints import save_checkpoint

            save_checkpoint(
                Path(run_dir) / "checkpoints" / "tokenizer.pt",
                kind="tokenizer",
                configs={"tokenizer": tok.cfg, "schedule": schedule},
                payload={
                    "model": tok.state_dict(),
                    "optimizer": opt.state_dict(),
                    "ema": ema.state_dict(),
                    "step": step + 1,
                },
            )
    return TrainResult(
        final_loss=final_parts.get("total", math.nan),
        final_components=final_parts,
        val_psnr=val_psnr,
        history=log.records,
    )


def train_generator(
    model,
    latent_batch,
    schedule: TrainSchedule,
    log: RunLog | None = None,
    run_dir: Path | None = None,
    resume: dict | None = None,
    configs: dict | None = None,
    on_step=None,
) -> TrainResult:
    """Train the joint velocity model with the flow-matching objective.

    ``latent_batch(step, batch_size)`` returns (LatentPair, labels) for
    that step; in the image pipeline it wraps tokenizer encoding, and in
    synthetic studies it can emit latents directly. Labels are dropped
    to the null class at the configured rate for guidance-free use.
    """
    log = log or RunLog()
    cfg = model.cfg
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    ema = EMA(model, decay=schedule.ema_decay)
    start_step = 0
    if resume is not None:
        model.load_state_dict(resume["model"])
        opt.load_state_dict(resume["optimizer"])
        ema.load_state_dict(resume["ema"])
        start_step = resume["step"]
    model.train()
    last_good: dict[str, float] = {}
    final_parts: dict[str, float] = {}
    for step in range(start_step, schedule.steps):
        z, labels = latent_batch(step, schedule.batch_size)
        g_noise = generator_for(schedule.seed, "flow-noise", step)
        eps = LatentPair(
            torch.randn(z.patch.shape, generator=g_noise, dtype=z.patch.dtype),
            torch.randn(z.query.shape, generator=g_noise, dtype=z.query.dtype),
        )
        t = torch.rand(z.batch, generator=generator_for(schedule.seed, "time", step)).to(
            z.patch.dtype
        )
        drop = (
            torch.rand(z.batch, generator=generator_for(schedule.seed, "drop", step))
            < cfg.label_drop
        )
        labels = torch.where(drop, torch.full_like(labels, model.null_class), labels)
        z_t = interpolate(z, eps, t)
        v_pred = model(z_t, t, labels)
        loss, parts_t = fm_loss(v_pred, z, eps, cfg.lambda_query)
        parts = {
            "patch": parts_t["patch"].item(),
            "query": parts_t["query"].item(),
            "total": loss.item(),
        }
        _check_finite(parts, step, schedule.lr, last_good)
        last_good = parts
        final_parts = parts
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
        opt.step()
        ema.update(model)
        if on_step is not None:
            on_step(step, model)
        if (step + 1) % schedule.eval_every == 0 or step == schedule.steps - 1:
            log.write(stage="generator", step=step, **parts)
        if run_dir is not None and (
            (step + 1) % schedule.checkpoint_every == 0 or step == schedule.steps - 1
        ):
            from .checkpoints import save_checkpoint

            save_checkpoint(
                Path(run_dir) / "checkpoints" / "generator.pt",
                kind="generator",
                configs={"generator": cfg, "schedule": schedule, **(configs or {})},
                payload={
                    "model": model.state_dict(),
                    "optimizer": opt.state_dict(),
                    "ema": ema.state_dict(),
                    "step": step + 1,
                },
            )
    return TrainResult(
        final_loss=final_parts.get("total", math.nan),
        final_components=final_parts,
        val_psnr=None,
        history=log.records,
    )


def image_latent_source(tok: Tokenizer, dataset, indices, seed: int, sigma_aug: float):
    """Adapter: per-step image batches encoded into (noised) latent pairs."""

    def latent_batch(step: int, batch_size: int):
        images, labels = batch_at(dataset, indices, batch_size, seed, step)
        with torch.no_grad():
            z = tok.encode(images)
        if sigma_aug > 0.0:
            g = generator_for(seed, "aug", step)
            z = LatentPair(
                z.patch + sigma_aug * torch.randn(z.patch.shape, generator=g),
                z.query + sigma_aug * torch.randn(z.query.shape, generator=g),
            )
        return z, labels

    return latent_batch
