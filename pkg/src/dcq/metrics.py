"""Reconstruction and generation metrics.

Everything here is exact desk-scale math: PSNR and SSIM on pixel pairs,
a Fréchet distance between Gaussian moment estimates of feature sets,
brute-force cosine nearest neighbors, and k-NN precision/recall between
feature clouds. Feature extraction lives in :mod:`dcq.losses`; these
functions only consume arrays.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .common import ShapeError


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs.

    ``peak`` is the data range (2 for images in [-1, 1]).
    """
    if a.shape != b.shape:
        raise ShapeError(f"psnr inputs must match, got {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = (a.double() - b.double()).square().mean().item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-coords.square() / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, peak: float = 2.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Accepts (H, W, C) or (batch, H, W, C) channel-last images; channels
    are treated independently and averaged. Constants follow the
    standard k1 = 0.01, k2 = 0.03 stabilizers scaled by the data range.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs must match, got {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    if a.ndim != 4:
        raise ShapeError(f"ssim expects (batch, height, width, channels), got {a.ndim}d")
    bsz, h, w, ch = a.shape
    if h < window or w < window:
        raise ShapeError(
            f"image {h}x{w} is smaller than the {window}x{window} ssim window"
        )
    kernel = _gaussian_window(window, sigma).view(1, 1, window, window)
    x = a.permute(0, 3, 1, 2).reshape(bsz * ch, 1, h, w).double()
    y = b.permute(0, 3, 1, 2).reshape(bsz * ch, 1, h, w).double()

    def blur(t):
        return F.conv2d(t, kernel)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return (num / den).mean().item()


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray
) -> float:
    """Fréchet distance between two Gaussians from their moments.

    ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), computed
    with symmetric eigendecompositions; small negative eigenvalues from
    finite-sample noise are clamped to zero.
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if sigma1.shape != sigma2.shape or sigma1.shape[0] != sigma1.shape[1]:
        raise ShapeError(
            f"covariances must be square and matched, got {sigma1.shape} vs {sigma2.shape}"
        )
    if mu1.shape != mu2.shape or mu1.shape[0] != sigma1.shape[0]:
        raise ShapeError(f"mean axis {mu1.shape} does not match covariance {sigma1.shape}")
    diff = float(np.dot(mu1 - mu2, mu1 - mu2))
    vals1, vecs1 = np.linalg.eigh((sigma1 + sigma1.T) / 2.0)
    root1 = (vecs1 * np.sqrt(np.clip(vals1, 0.0, None))) @ vecs1.T
    inner = root1 @ ((sigma2 + sigma2.T) / 2.0) @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_geo = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    return diff + float(np.trace(sigma1) + np.trace(sigma2)) - 2.0 * tr_geo


def moments(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of a (n, d) feature matrix."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeError(f"features must be 2d (samples, dims), got {feats.ndim}d")
    if feats.shape[0] < 2:
        raise ShapeError(f"need at least 2 samples for moments, got {feats.shape[0]}")
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False)
    return mu, np.atleast_2d(sigma)


def fid_proxy(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between two feature sets under Gaussian moments.

    Uses a small desk-scale extractor rather than a large pretrained
    network, so values are comparable within this corpus only.
    """
    mu_a, sig_a = moments(features_a)
    mu_b, sig_b = moments(features_b)
    return frechet_distance(mu_a, sig_a, mu_b, sig_b)


def inception_proxy(probs: np.ndarray) -> float:
    """Inception-score analog over desk classifier probabilities."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1.0)
    p = p / p.sum(axis=1, keepdims=True)
    marginal = p.mean(axis=0)
    kl = (p * (np.log(p) - np.log(marginal)[None, :])).sum(axis=1)
    return float(np.exp(kl.mean()))


def nearest_neighbors(pool: np.ndarray, anchor_index: int, k: int) -> np.ndarray:
    """Indices of the k cosine-nearest embeddings to an anchor, excluding it.

    ``pool`` is (n, d). Raises if k is not smaller than the pool size.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2:
        raise ShapeError(f"pool must be 2d (images, dims), got {pool.ndim}d")
    n = pool.shape[0]
    if not 0 <= anchor_index < n:
        raise ValueError(f"anchor index {anchor_index} out of range for pool of {n}")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the pool size {n}")
    norms = np.linalg.norm(pool, axis=1)
    norms = np.where(norms == 0.0, 1.0, norms)
    unit = pool / norms[:, None]
    sims = unit @ unit[anchor_index]
    sims[anchor_index] = -np.inf
    order = np.argsort(-sims, kind="stable")
    return order[:k]


def knn_precision_recall(
    real: np.ndarray, generated: np.ndarray, k: int = 3
) -> tuple[float, float]:
    """Manifold precision/recall between feature clouds.

    A point is covered by a cloud if it falls within the distance from
    some cloud member to that member's k-th nearest neighbor inside its
    own cloud. Precision covers generated points with the real manifold;
    recall covers real points with the generated manifold.
    """
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    for name, arr in (("real", real), ("generated", generated)):
        if arr.ndim != 2:
            raise ShapeError(f"{name} features must be 2d, got {arr.ndim}d")
        if k >= arr.shape[0]:
            raise ValueError(f"k={k} must be smaller than the {name} set size {arr.shape[0]}")

    def radii(cloud):
        d = np.linalg.norm(cloud[:, None, :] - cloud[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        return np.sort(d, axis=1)[:, k - 1]

    def covered(points, cloud, cloud_radii):
        d = np.linalg.norm(points[:, None, :] - cloud[None, :, :], axis=-1)
        return (d <= cloud_radii[None, :]).any(axis=1)

    precision = float(covered(generated, real, radii(real)).mean())
    recall = float(covered(real, generated, radii(generated)).mean())
    return precision, recall


def two_proportion_z(hits1: int, n1: int, hits2: int, n2: int) -> tuple[float, float]:
    """One-sided two-proportion z-test that rate 1 exceeds rate 2.

    Returns (z, p). Uses the pooled-variance normal approximation; the
    p value is the upper tail via the complementary error function.
    """
    if n1 <= 0 or n2 <= 0:
        raise ValueError("both sample sizes must be positive")
    p1, p2 = hits1 / n1, hits2 / n2
    pooled = (hits1 + hits2) / (n1 + n2)
    var = pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)
    if var == 0.0:
        return 0.0, 0.5
    z = (p1 - p2) / math.sqrt(var)
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return z, p


def pool_embeddings(latent_patch: torch.Tensor, latent_query: torch.Tensor, rep: str) -> np.ndarray:
    """Per-image embedding: mean over query tokens or mean over patch tokens."""
    if rep == "query":
        if latent_query.shape[1] == 0:
            raise ValueError("query representation requested but the query stream is empty")
        pooled = latent_query.mean(dim=1)
    elif rep == "patch":
        pooled = latent_patch.mean(dim=1)
    else:
        raise ValueError(f"rep must be 'query' or 'patch', got {rep!r}")
    return pooled.detach().double().cpu().numpy()
