"""Toy-scale evaluation: Fréchet distance, classifier diversity score, radial spectra.

Absolute numbers from the desk-scale feature extractors here ("toy-FID",
"toy-IS") are not comparable with Inception-based scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import rel_entr

from .losses import random_conv_weights


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two samples")
        if not np.allclose(self.cov, self.cov.T):
            raise ValueError("covariance must be symmetric")


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def feature_stats(samples, extractor: Callable | None = None) -> FeatureStats:
    """Unbiased mean/covariance of ``extractor(samples)`` (rows are samples)."""
    feats = _as_numpy(extractor(samples) if extractor is not None else samples)
    feats = feats.reshape(feats.shape[0], -1)
    n = feats.shape[0]
    if n < 2:
        raise ValueError(f"need at least two samples, got {n}")
    cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    return FeatureStats(mean=feats.mean(axis=0), cov=0.5 * (cov + cov.T), n=n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the cross term is computed as ``Tr sqrt(S_a^{1/2} S_b S_a^{1/2})``,
    which has the same spectrum but stays symmetric.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    sa = 0.5 * (a.cov + a.cov.T)
    sb = 0.5 * (b.cov + b.cov.T)
    if np.array_equal(a.mean, b.mean) and np.array_equal(sa, sb):
        return 0.0
    root_a = _psd_sqrt(sa)
    cross = np.linalg.eigvalsh(0.5 * (root_a @ sb @ root_a + (root_a @ sb @ root_a).T))
    tr_cross = float(np.sqrt(np.clip(cross, 0.0, None)).sum())
    diff = a.mean - b.mean
    d = float(diff @ diff) + float(np.trace(sa) + np.trace(sb)) - 2.0 * tr_cross
    return max(d, 0.0)


def diversity_score(samples, classifier: Callable | None = None, atol: float = 1e-6) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))`` for a classifier emitting probability rows."""
    probs = _as_numpy(classifier(samples) if classifier is not None else samples)
    if probs.ndim != 2:
        raise ValueError("classifier must return one probability vector per sample")
    if (probs < -atol).any() or not np.allclose(probs.sum(axis=1), 1.0, atol=atol):
        raise ValueError("classifier outputs are not normalised probability vectors")
    probs = np.clip(probs, 0.0, None)
    marginal = probs.mean(axis=0, keepdims=True)
    kl = rel_entr(probs, marginal).sum(axis=1)
    return float(math.exp(kl.mean()))


# -- desk-scale extractors ---------------------------------------------------


class PooledPixels:
    """Identity-style features: average-pool ``(B, H, W, C)`` images by ``factor`` and flatten."""

    def __init__(self, factor: int = 1):
        self.factor = factor

    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(images).double().permute(0, 3, 1, 2)
        if self.factor > 1:
            x = F.avg_pool2d(x, self.factor)
        return x.reshape(x.shape[0], -1).numpy()


class RandomConvClassifier:
    """Seed-fixed random conv features, global-average pooled, into a softmax over ``classes``."""

    def __init__(self, in_channels: int = 3, classes: int = 10, width: int = 16, seed: int = 0,
                 temperature: float = 0.1):
        (w, b), = random_conv_weights(seed, (in_channels, width))
        rng = np.random.default_rng(seed + 1)
        self.w = torch.from_numpy(w)
        self.b = torch.from_numpy(b)
        self.head = torch.from_numpy(rng.standard_normal((width, classes)) / math.sqrt(width))
        self.temperature = temperature

    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(images).double().permute(0, 3, 1, 2)
        h = torch.tanh(F.conv2d(x, self.w, self.b, padding=1)).mean(dim=(2, 3))
        return torch.softmax(h @ self.head / self.temperature, dim=-1).numpy()


# -- spectral analysis -------------------------------------------------------


@dataclass
class SpectralProfile:
    radial_energy: np.ndarray
    bin_centers: np.ndarray
    low_ratio: float
    high_ratio: float
    cutoff: float = 0.6
    magnitude: np.ndarray | None = None


def normalized_radius(rows: int, cols: int) -> np.ndarray:
    """Radial frequency of every DFT lattice point (unshifted layout), scaled so the
    corner of the spectrum is ``f = 1``."""
    ky = np.abs(np.fft.fftfreq(rows) * rows)
    kx = np.abs(np.fft.fftfreq(cols) * cols)
    r = np.hypot(ky[:, None], kx[None, :])
    return r / r.max()


def spectral_profile(features, cutoff: float = 0.6, bins: int = 32) -> SpectralProfile:
    """Channel-averaged power spectrum of a ``rows x cols x channels`` map, binned radially.

    Energy is ``|DFT|^2 / (rows * cols)`` averaged over channels, so the total equals the
    channel-mean spatial sum of squares. The DC term belongs to the low band.
    """
    x = _as_numpy(features)
    if x.ndim == 2:
        x = x[..., None]
    rows, cols = x.shape[:2]
    if rows < 2 or cols < 2:
        raise ValueError(f"spectral analysis needs at least a 2x2 map, got {rows}x{cols}")
    spec = np.fft.fft2(x, axes=(0, 1))
    power = (np.abs(spec) ** 2).mean(axis=2) / (rows * cols)
    f = normalized_radius(rows, cols)
    idx = np.rint(f * bins).astype(int)
    radial = np.bincount(idx.ravel(), weights=power.ravel(), minlength=bins + 1)
    total = power.sum()
    low = power[f <= cutoff].sum()
    low_ratio = float(low / total) if total > 0 else 1.0
    return SpectralProfile(
        radial_energy=radial,
        bin_centers=np.arange(bins + 1) / bins,
        low_ratio=low_ratio,
        high_ratio=1.0 - low_ratio,
        cutoff=cutoff,
        magnitude=np.fft.fftshift(np.abs(spec).mean(axis=2)),
    )


def tokens_to_map(tokens, grid: tuple[int, int]) -> np.ndarray:
    """``(L, width)`` tokens -> ``rows x cols x width`` feature map."""
    data = _as_numpy(tokens)
    rows, cols = grid
    return data.reshape(rows, cols, data.shape[-1])
