"""Training objective: v-loss (as a reweighted x-loss), perceptual loss, representation alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import LossWeights, VelocityClipConfig
from .diffusion import one_minus_t_clipped
from .model import TokenSequence, patchify


class PerceptualExtractorError(RuntimeError):
    pass


class DegenerateInputError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


@dataclass
class LossReport:
    fm: Tensor | float
    irepa: Tensor | float
    perceptual: Tensor | float
    total: Tensor | float

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("fm", "irepa", "perceptual", "total")}


def fm_loss(x_pred: Tensor, x: Tensor, t, clip: VelocityClipConfig = VelocityClipConfig()) -> Tensor:
    """Mean of ``(x_pred - x)^2 / max(1 - t, clip)^2``; equals the mean squared velocity error."""
    if x_pred.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_pred.shape)} vs {tuple(x.shape)}")
    denom = one_minus_t_clipped(t, clip, ref=x_pred)
    return ((x_pred - x) ** 2 / denom**2).mean()


# -- perceptual --------------------------------------------------------------


class FeatureExtractor(Protocol):
    """Deterministic map from ``(B, H, W, C)`` images to a list of ``(B, C_k, H_k, W_k)`` maps.

    ``unit_normalize`` selects whether features are normalised to unit length
    along the channel axis before comparison.
    """

    unit_normalize: bool

    def __call__(self, images: Tensor) -> list[Tensor]: ...


class IdentityExtractor:
    unit_normalize = False

    def __call__(self, images: Tensor) -> list[Tensor]:
        return [images.permute(0, 3, 1, 2)]


def random_conv_weights(seed: int, channels: Sequence[int], kernel: int = 3):
    """Weights for :class:`RandomConvExtractor`, drawn layer by layer (weight, then bias)."""
    rng = np.random.default_rng(seed)
    layers = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        fan_in = cin * kernel * kernel
        w = rng.standard_normal((cout, cin, kernel, kernel)) / math.sqrt(fan_in)
        b = 0.1 * rng.standard_normal(cout)
        layers.append((w, b))
    return layers


class RandomConvExtractor(nn.Module):
    """Frozen multi-scale stack: ``conv3x3 -> tanh`` per level, 2x average pooling between
    levels. Every level's activation is one feature map. Weights are fixed by ``seed``."""

    unit_normalize = True

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (8, 16, 16), seed: int = 0):
        super().__init__()
        self.seed = seed
        chans = (in_channels, *widths)
        for i, (w, b) in enumerate(random_conv_weights(seed, chans)):
            self.register_buffer(f"w{i}", torch.from_numpy(w))
            self.register_buffer(f"b{i}", torch.from_numpy(b))
        self.levels = len(widths)

    def forward(self, images: Tensor) -> list[Tensor]:
        h = images.permute(0, 3, 1, 2)
        feats = []
        for i in range(self.levels):
            if i > 0:
                if min(h.shape[-2:]) < 2:
                    break
                h = F.avg_pool2d(h, 2)
            w = getattr(self, f"w{i}").to(h.dtype)
            b = getattr(self, f"b{i}").to(h.dtype)
            h = torch.tanh(F.conv2d(h, w, b, padding=w.shape[-1] // 2))
            feats.append(h)
        return feats


def _unit(f: Tensor, eps: float = 1e-10) -> Tensor:
    return f / (torch.sqrt((f**2).sum(dim=1, keepdim=True)) + eps)


def perceptual_loss(x_pred: Tensor, x: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Sum over feature levels of the mean squared difference of (optionally unit-normalised)
    features."""
    try:
        fa = extractor(x_pred)
        fb = extractor(x)
    except Exception as exc:  # noqa: BLE001 - re-raised with a distinct type
        raise PerceptualExtractorError(f"feature extractor failed: {exc}") from exc
    if len(fa) != len(fb) or not fa:
        raise PerceptualExtractorError("extractor returned inconsistent feature lists")
    total = x_pred.new_zeros(())
    for a, b in zip(fa, fb):
        if getattr(extractor, "unit_normalize", True):
            a, b = _unit(a), _unit(b)
        total = total + ((a - b) ** 2).mean()
    return total


# -- representation alignment ------------------------------------------------


class RandomPatchEncoder(nn.Module):
    """Frozen reference encoder: patchify the clean image, then a fixed random
    linear map and tanh per patch. Token grid matches the model's patch grid."""

    def __init__(self, patch_size: int, channels: int, out_dim: int, seed: int = 0):
        super().__init__()
        self.patch_size = patch_size
        rng = np.random.default_rng(seed)
        fan_in = patch_size * patch_size * channels
        w = rng.standard_normal((fan_in, out_dim)) / math.sqrt(fan_in)
        self.register_buffer("weight", torch.from_numpy(w))

    @torch.no_grad()
    def forward(self, images: Tensor) -> TokenSequence:
        tokens = patchify(images, self.patch_size)
        return TokenSequence(torch.tanh(tokens.data @ self.weight.to(images.dtype)), tokens.grid)


class Projector(nn.Module):
    """Trainable per-token MLP from backbone width to reference width."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(in_dim, out_dim)
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, out_dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


def irepa_loss(tapped: TokenSequence, reference: TokenSequence, projector=None,
               eps: float = 1e-12) -> Tensor:
    """Mean over tokens of ``1 - cos(projector(tapped_i), reference_i)``; range [0, 2]."""
    if tapped.length != reference.length:
        raise ValueError(f"token count mismatch: {tapped.length} vs {reference.length}")
    a = projector(tapped.data) if projector is not None else tapped.data
    b = reference.data.to(a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"projected width {a.shape[-1]} != reference width {b.shape[-1]}")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if bool((na <= eps).any()) or bool((nb <= eps).any()):
        raise DegenerateInputError("zero-norm token in representation alignment")
    cos = (a * b).sum(-1) / (na * nb)
    return (1 - cos).mean()


# -- total -------------------------------------------------------------------


def total_loss(fm, irepa, perceptual, weights: LossWeights = LossWeights()) -> LossReport:
    for name, value in (("fm", fm), ("irepa", irepa), ("perceptual", perceptual)):
        value = float(value.detach()) if isinstance(value, Tensor) else float(value)
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    total = fm + weights.lambda_irepa * irepa + weights.beta_lpips * perceptual
    return LossReport(fm=fm, irepa=irepa, perceptual=perceptual, total=total)
