"""Tokenizer losses and the desk-scale feature extractor.

Reconstruction combines pixel L1 with a perceptual proxy: feature
distances under a small fixed convolutional network. The same network
serves as the Fréchet-metric feature extractor and, through an optional
classifier head, as the probability source for the inception-style
proxy. It can be left at its random initialization or briefly fitted on
the corpus labels; either way it is frozen before being used inside a
loss.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import ShapeError


class ConvFeatures(nn.Module):
    """Three-stage strided conv net over channel-last images in [-1, 1]."""

    def __init__(self, feature_dim: int = 64, class_count: int | None = None, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(64, feature_dim, 3, stride=2, padding=1)
        self.class_head = nn.Linear(feature_dim, class_count) if class_count else None
        self.feature_dim = feature_dim

    def stages(self, images: torch.Tensor) -> list[torch.Tensor]:
        if images.ndim != 4:
            raise ShapeError(f"images must be 4d (batch, height, width, channels), got {images.ndim}d")
        x = images.permute(0, 3, 1, 2)
        s1 = F.gelu(self.conv1(x))
        s2 = F.gelu(self.conv2(s1))
        s3 = F.gelu(self.conv3(s2))
        return [s1, s2, s3]

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Global average-pooled final-stage features, (batch, feature_dim)."""
        return self.stages(images)[-1].mean(dim=(2, 3))

    def class_probs(self, images: torch.Tensor) -> torch.Tensor:
        if self.class_head is None:
            raise ValueError("this extractor was built without a classifier head")
        return self.class_head(self.features(images)).softmax(dim=-1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)

    def fit(
        self,
        images: torch.Tensor,
        labels: torch.Tensor,
        steps: int = 200,
        batch_size: int = 32,
        lr: float = 1e-3,
        generator: torch.Generator | None = None,
    ) -> "ConvFeatures":
        """Brief supervised fit so features reflect corpus structure.

        Freezes the module afterwards; returns self.
        """
        if self.class_head is None:
            raise ValueError("fit requires a classifier head (pass class_count)")
        opt = torch.optim.AdamW(self.parameters(), lr=lr)
        n = images.shape[0]
        for _ in range(steps):
            idx = torch.randint(0, n, (min(batch_size, n),), generator=generator)
            logits = self.class_head(self.features(images[idx]))
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.requires_grad_(False)
        self.eval()
        return self


def perceptual_distance(extractor: ConvFeatures, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared feature distance averaged over extractor stages."""
    stages_pred = extractor.stages(pred)
    stages_target = extractor.stages(target)
    total = pred.new_zeros(())
    for sp, st in zip(stages_pred, stages_target):
        total = total + (sp - st).square().mean()
    return total / len(stages_pred)


def recon_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    perceptual: ConvFeatures | None = None,
    w_perc: float = 0.5,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Pixel L1 plus weighted perceptual proxy.

    With ``perceptual=None`` or ``w_perc=0`` this is plain L1, and the
    perceptual component is reported as zero.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    l1 = (pred - target).abs().mean()
    if perceptual is not None and w_perc > 0.0:
        perc = perceptual_distance(perceptual, pred, target)
    else:
        perc = l1.new_zeros(())
    return l1 + w_perc * perc, {"l1": l1, "perceptual": perc}


def distill_loss(student_final: torch.Tensor, teacher_final: torch.Tensor) -> torch.Tensor:
    """MSE between raw final-block features of student and frozen teacher.

    Computed before the latent normalization so the student tracks the
    teacher's actual feature scale, not just its direction.
    """
    if student_final.shape != teacher_final.shape:
        raise ShapeError(
            f"student {tuple(student_final.shape)} does not match teacher {tuple(teacher_final.shape)}"
        )
    return (student_final - teacher_final.detach()).square().mean()
