"""Datasets: a parametric synthetic shapes corpus and folder ingestion.

The synthetic corpus draws one colored, striped shape per image over a
softly tinted gradient background. Shape identity is the class label;
fill color, stripe frequency/phase/angle, position, and size are
independent nuisance factors. An optional speckle layer scatters small
colored dots on top, each with its own position and color, to raise the
amount of localized class-irrelevant detail an encoder must carry.
Every image is a pure function of (seed, index), so corpora are
reproducible without storing pixels.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import warnings
from pathlib import Path

import numpy as np
import torch

from .common import ConfigError

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "diamond", "ring")
COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan")
_PALETTE = np.array(
    [
        [0.9, -0.7, -0.7],
        [-0.7, 0.9, -0.7],
        [-0.7, -0.7, 0.9],
        [0.9, 0.9, -0.7],
        [0.9, -0.7, 0.9],
        [-0.7, 0.9, 0.9],
    ],
    dtype=np.float32,
)


@dataclasses.dataclass
class SyntheticSpec:
    n_images: int = 512
    image_size: int = 32
    n_shapes: int = 6
    n_colors: int = 6
    texture: bool = True
    background_gradient: bool = True
    n_dots: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_shapes <= len(SHAPE_NAMES):
            raise ConfigError(f"n_shapes must be in 1..{len(SHAPE_NAMES)}, got {self.n_shapes}")
        if not 1 <= self.n_colors <= len(_PALETTE):
            raise ConfigError(f"n_colors must be in 1..{len(_PALETTE)}, got {self.n_colors}")
        if self.n_images < 1:
            raise ConfigError(f"n_images must be positive, got {self.n_images}")
        if self.n_dots < 0:
            raise ConfigError(f"n_dots must be non-negative, got {self.n_dots}")


def _shape_mask(kind: str, xx: np.ndarray, yy: np.ndarray, size: float) -> np.ndarray:
    if kind == "circle":
        return xx * xx + yy * yy <= size * size
    if kind == "square":
        return (np.abs(xx) <= size) & (np.abs(yy) <= size)
    if kind == "triangle":
        return (yy >= -size) & (np.abs(xx) <= (size - yy) * 0.6)
    if kind == "cross":
        arm = 0.4 * size
        return ((np.abs(xx) <= arm) & (np.abs(yy) <= size)) | (
            (np.abs(yy) <= arm) & (np.abs(xx) <= size)
        )
    if kind == "diamond":
        return np.abs(xx) + np.abs(yy) <= size
    if kind == "ring":
        r2 = xx * xx + yy * yy
        return (r2 <= size * size) & (r2 >= (0.55 * size) ** 2)
    raise ConfigError(f"unknown shape kind {kind!r}")


def render_synthetic(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int, int]:
    """Render image ``index``; returns (image, shape_idx, color_idx).

    The image is (size, size, 3) float32 in [-1, 1].
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    shape_idx = int(rng.integers(spec.n_shapes))
    color_idx = int(rng.integers(spec.n_colors))
    s = spec.image_size
    lin = np.linspace(-1.0, 1.0, s, dtype=np.float32)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    base = np.float32(-0.25 + 0.1 * rng.uniform(-1, 1))
    image = np.full((s, s, 3), base, dtype=np.float32)
    if spec.background_gradient:
        theta = rng.uniform(0, 2 * np.pi)
        ramp = ((xx * np.cos(theta) + yy * np.sin(theta)) + 1.5) / 3.0
        tint_a = rng.uniform(-0.18, 0.18, size=3).astype(np.float32)
        tint_b = rng.uniform(-0.18, 0.18, size=3).astype(np.float32)
        image = image + tint_a[None, None, :] + ramp[:, :, None] * (tint_b - tint_a)[None, None, :]

    size = rng.uniform(0.42, 0.68)
    cx, cy = rng.uniform(-0.16, 0.16, size=2)
    mask = _shape_mask(SHAPE_NAMES[shape_idx], xx - cx, yy - cy, size)

    fill = _PALETTE[color_idx] * np.float32(rng.uniform(0.82, 1.0))
    shade = np.ones((s, s), dtype=np.float32)
    if spec.texture:
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        angle = rng.uniform(0, np.pi)
        carrier = xx * np.cos(angle) + yy * np.sin(angle)
        shade = 0.78 + 0.22 * np.sin(2 * np.pi * freq * carrier + phase).astype(np.float32)
    image[mask] = fill[None, :] * shade[mask, None]

    # Speckles are drawn last (over background and shape) so each one is an
    # independent localized detail the pixels always show.
    for _ in range(spec.n_dots):
        dx, dy = rng.uniform(-0.92, 0.92, size=2)
        dot_fill = _PALETTE[int(rng.integers(spec.n_colors))] * np.float32(rng.uniform(0.85, 1.0))
        radius = rng.uniform(0.06, 0.1)
        dot = (xx - dx) ** 2 + (yy - dy) ** 2 <= radius * radius
        image[dot] = dot_fill[None, :]

    return np.clip(image, -1.0, 1.0).astype(np.float32), shape_idx, color_idx


class SyntheticShapes:
    """Deterministic in-memory shapes corpus; labels are shape indices."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self._cache: dict[int, tuple[torch.Tensor, int, int]] = {}

    def __len__(self) -> int:
        return self.spec.n_images

    def _render(self, index: int) -> tuple[torch.Tensor, int, int]:
        if index not in self._cache:
            image, shape_idx, color_idx = render_synthetic(self.spec, index)
            self._cache[index] = (torch.from_numpy(image), shape_idx, color_idx)
        return self._cache[index]

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        image, shape_idx, _ = self._render(index)
        return image, shape_idx

    def attributes(self, index: int) -> dict[str, int]:
        _, shape_idx, color_idx = self._render(index)
        return {"shape": shape_idx, "color": color_idx}

    def name(self, index: int) -> str:
        return f"synthetic-{self.spec.seed}-{index:06d}"

    @property
    def class_count(self) -> int:
        return self.spec.n_shapes

    @property
    def image_size(self) -> int:
        return self.spec.image_size


class FolderDataset:
    """Images under a directory; one class per subdirectory, else one class.

    Unreadable files are skipped with a warning; an empty result is an
    error. Images are resized to ``image_size`` and scaled to [-1, 1].
    """

    EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

    def __init__(self, root: str | Path, image_size: int = 64):
        from PIL import Image  # imported here so headless metric paths stay light

        self._Image = Image
        self.root = Path(root)
        self.size = image_size
        if not self.root.is_dir():
            raise ConfigError(f"dataset directory {self.root} does not exist")
        subdirs = sorted(p for p in self.root.iterdir() if p.is_dir())
        entries: list[tuple[Path, int]] = []
        if subdirs and any(self._list_images(d) for d in subdirs):
            self.class_names = [d.name for d in subdirs]
            for label, d in enumerate(subdirs):
                entries.extend((f, label) for f in self._list_images(d))
        else:
            self.class_names = [self.root.name]
            entries = [(f, 0) for f in self._list_images(self.root)]
        self.entries = entries
        if not self.entries:
            raise ConfigError(f"dataset is empty: no readable images under {self.root}")

    def _list_images(self, directory: Path) -> list[Path]:
        found = sorted(f for f in directory.iterdir() if f.suffix.lower() in self.EXTENSIONS)
        readable = []
        for f in found:
            try:
                with self._Image.open(f) as img:
                    img.verify()
                readable.append(f)
            except OSError as exc:
                warnings.warn(f"skipping unreadable image {f}: {exc}")
        return readable

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        path, label = self.entries[index]
        with self._Image.open(path) as img:
            img = img.convert("RGB").resize((self.size, self.size), self._Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
        return torch.from_numpy(arr), label

    def attributes(self, index: int) -> dict[str, int]:
        return {"shape": self.entries[index][1], "color": 0}

    def name(self, index: int) -> str:
        return self.entries[index][0].name

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.size


@dataclasses.dataclass
class DataConfig:
    kind: str = "synthetic"  # "synthetic" or "folder"
    path: str = ""
    n_images: int = 512
    image_size: int = 64  # matches the default backbone image size
    n_shapes: int = 6
    n_colors: int = 6
    texture: bool = True
    n_dots: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "folder"):
            raise ConfigError(f"dataset kind must be 'synthetic' or 'folder', got {self.kind!r}")
        if self.kind == "folder" and not self.path:
            raise ConfigError("folder datasets need a path")


def ingest(cfg: DataConfig):
    """Build the dataset a config describes.

    For folder datasets, a relative path is resolved against the
    DCQ_DATA_ROOT environment variable when it is set.
    """
    if cfg.kind == "synthetic":
        return SyntheticShapes(
            SyntheticSpec(
                n_images=cfg.n_images,
                image_size=cfg.image_size,
                n_shapes=cfg.n_shapes,
                n_colors=cfg.n_colors,
                texture=cfg.texture,
                n_dots=cfg.n_dots,
                seed=cfg.seed,
            )
        )
    path = Path(cfg.path)
    root = os.environ.get("DCQ_DATA_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return FolderDataset(path, image_size=cfg.image_size)


def split_train_val(dataset) -> tuple[list[int], list[int]]:
    """Deterministic 90/10 split keyed by a hash of each item's name."""
    train, val = [], []
    for i in range(len(dataset)):
        digest = hashlib.sha1(dataset.name(i).encode()).digest()
        (val if digest[0] % 10 == 0 else train).append(i)
    if not val and train:
        val.append(train.pop())
    if not train:
        raise ConfigError("dataset too small to split: no training items left")
    return train, val


def stack_items(dataset, indices) -> tuple[torch.Tensor, torch.Tensor]:
    images, labels = [], []
    for i in indices:
        img, lab = dataset[i]
        images.append(img)
        labels.append(lab)
    return torch.stack(images), torch.tensor(labels, dtype=torch.long)


def batch_at(dataset, indices, batch_size: int, seed: int, step: int) -> tuple[torch.Tensor, torch.Tensor]:
    """The batch for a given step, a pure function of (seed, step)."""
    from .common import generator_for

    g = generator_for(seed, "batch", step)
    pick = torch.randint(len(indices), (batch_size,), generator=g)
    return stack_items(dataset, [indices[int(i)] for i in pick])


def channel_permutation(images: torch.Tensor, seed: int, step: int) -> torch.Tensor:
    """Color-jitter augmentation: a random RGB permutation per batch.

    Used during backbone proxy pretraining so the learned features
    become insensitive to fill color while staying shape-selective.
    """
    from .common import generator_for

    g = generator_for(seed, "jitter", step)
    perm = torch.randperm(3, generator=g)
    scale = 0.85 + 0.3 * torch.rand((), generator=g)
    return (images[..., perm] * scale).clamp(-1.0, 1.0)
