"""Closed-form flow-matching math: time sampling, interpolation, velocity conversion.

Convention: ``t = 0`` is pure (scaled) noise and ``t = 1`` is clean data,

    z_t = t * x + (1 - t) * s * eps,        v = dz_t/dt = x - s * eps.

All functions accept torch tensors; ``t`` may be a Python float or a tensor
holding one time per batch element (broadcast over the trailing image axes).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import torch
from torch import Tensor

from .config import TimeSamplerConfig, VelocityClipConfig


@dataclass
class DiffusionSample:
    x: Tensor
    eps: Tensor
    t: Tensor | float
    z_t: Tensor
    v: Tensor
    noise_scale: float


def _broadcast_t(t, ref: Tensor) -> Tensor | float:
    if not isinstance(t, Tensor):
        return float(t)
    t = t.to(dtype=ref.dtype, device=ref.device)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ref.ndim - t.ndim))


def time_from_logit(g: Tensor | float) -> Tensor:
    return torch.sigmoid(torch.as_tensor(g, dtype=torch.float64))


def sample_time(
    generator: torch.Generator,
    cfg: TimeSamplerConfig = TimeSamplerConfig(),
    shape: tuple[int, ...] = (),
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Logit-normal time draw: ``t = sigmoid(g)`` with ``g ~ N(mu, sigma^2)``."""
    g = torch.randn(shape, generator=generator, dtype=torch.float64)
    return torch.sigmoid(cfg.mu + cfg.sigma * g).to(dtype)


def noise_scale_for(image_size: int) -> float:
    """Resolution-dependent noise scale ``image_size / 256`` (so 512 px uses N(0, 2^2 I))."""
    if image_size < 1:
        raise ValueError(f"image_size must be positive, got {image_size}")
    return float(Fraction(image_size, 256))


def interpolate(x: Tensor, eps: Tensor, t, s: float = 1.0) -> DiffusionSample:
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    if s <= 0:
        raise ValueError("noise scale must be positive")
    tb = _broadcast_t(t, x)
    noise = s * eps
    z_t = tb * x + (1 - tb) * noise
    return DiffusionSample(x=x, eps=eps, t=t, z_t=z_t, v=x - noise, noise_scale=s)


def one_minus_t_clipped(t, clip: VelocityClipConfig, ref: Tensor | None = None):
    if isinstance(t, Tensor):
        if ref is not None:
            t = _broadcast_t(t, ref)
        return (1 - t).clamp_min(clip.min_one_minus_t)
    return max(1.0 - float(t), clip.min_one_minus_t)


def x_to_velocity(
    x_pred: Tensor, z_t: Tensor, t, clip: VelocityClipConfig = VelocityClipConfig()
) -> Tensor:
    """Velocity implied by an x-prediction: ``(x_pred - z_t) / max(1 - t, clip)``."""
    if x_pred.shape != z_t.shape:
        raise ValueError(f"shape mismatch: x_pred {tuple(x_pred.shape)} vs z_t {tuple(z_t.shape)}")
    return (x_pred - z_t) / one_minus_t_clipped(t, clip, ref=x_pred)
