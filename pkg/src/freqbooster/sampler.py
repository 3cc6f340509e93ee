"""Deterministic flow-matching sampling with Heun steps and interval-gated CFG.

Integration runs from ``t = 0`` (noise) to ``t = 1`` (data) on a linear grid.
The last interval is an Euler step because the velocity is not defined at
``t = 1``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch
from torch import Tensor

from .config import SamplerConfig, VelocityClipConfig
from .diffusion import noise_scale_for, x_to_velocity

Denoiser = Callable[[Tensor, float, Tensor], Tensor]

DEFAULT_SWEEP_SCALES = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
DEFAULT_SWEEP_INTERVALS = ((0.1, 0.95),)


class SamplingError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class SweepError(RuntimeError):
    def __init__(self, message: str, rows: list[dict]):
        super().__init__(message)
        self.rows = rows


class CallCounter:
    """Wraps a denoiser and counts forward evaluations."""

    def __init__(self, fn: Denoiser):
        self.fn = fn
        self.calls = 0

    def __call__(self, z, t, labels):
        self.calls += 1
        return self.fn(z, t, labels)


def _resolve(model, null_class: int | None):
    cfg = getattr(model, "cfg", None)
    if null_class is None and cfg is not None:
        null_class = cfg.null_class
    if null_class is None:
        null_class = getattr(model, "null_class", None)
    fn = model.predict_x if hasattr(model, "predict_x") else model
    return fn, null_class


def velocity_field(model, z: Tensor, t: float, class_ids: Tensor, w: float = 1.0,
                   interval: tuple[float, float] = (0.1, 0.95),
                   clip: VelocityClipConfig = VelocityClipConfig(),
                   null_class: int | None = None) -> Tensor:
    """Guided velocity ``v_u + w (v_c - v_u)`` inside ``interval``, conditional velocity outside.

    ``w == 1`` short-circuits to the conditional branch, so it is bit-identical to
    unguided sampling and costs one forward.
    """
    fn, null_class = _resolve(model, null_class)
    v_c = x_to_velocity(fn(z, t, class_ids), z, t, clip)
    lo, hi = interval
    if w == 1.0 or not lo <= t <= hi:
        return v_c
    if null_class is None:
        raise ValueError("guidance needs a null class id")
    null = torch.full_like(class_ids, null_class)
    v_u = x_to_velocity(fn(z, t, null), z, t, clip)
    return v_u + w * (v_c - v_u)


def _check_finite(x: Tensor, what: str):
    if not bool(torch.isfinite(x).all()):
        raise SamplingError(f"non-finite {what}")


def heun_step(f: Callable[[Tensor, float], Tensor], z: Tensor, t: float, dt: float,
              final: bool | None = None) -> Tensor:
    """One Heun (trapezoidal predictor-corrector) step; Euler when the step ends at t = 1."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t + dt > 1 + 1e-9:
        raise ValueError(f"step overshoots t = 1 (t={t}, dt={dt})")
    if final is None:
        final = math.isclose(t + dt, 1.0, rel_tol=0.0, abs_tol=1e-9)
    k1 = f(z, t)
    _check_finite(k1, "velocity")
    if final:
        z_next = z + dt * k1
    else:
        k2 = f(z + dt * k1, t + dt)
        _check_finite(k2, "corrector velocity")
        z_next = z + (dt / 2) * (k1 + k2)
    _check_finite(z_next, "state")
    return z_next


def euler_step(f, z: Tensor, t: float, dt: float) -> Tensor:
    k1 = f(z, t)
    _check_finite(k1, "velocity")
    return z + dt * k1


def time_grid(steps: int) -> list[float]:
    return [i / steps for i in range(steps + 1)]


def expected_nfe(steps: int, solver: str = "heun", cfg_scale: float = 1.0,
                 interval: tuple[float, float] = (0.1, 0.95)) -> int:
    """Model forwards for one sampling run, counted from the grid."""
    grid = time_grid(steps)
    times = []
    for i in range(steps):
        times.append(grid[i])
        if solver == "heun" and i < steps - 1:
            times.append(grid[i + 1])
    lo, hi = interval
    guided = cfg_scale != 1.0
    return sum(2 if guided and lo <= t <= hi else 1 for t in times)


@torch.no_grad()
def sample(model, cfg: SamplerConfig, class_ids: Sequence[int] | Tensor, image_size: int,
           channels: int = 3, null_class: int | None = None, dtype: torch.dtype | None = None,
           return_info: bool = False, trajectory: list | None = None):
    """Generate one image per entry of ``class_ids``; output is clamped to [-1, 1].

    With ``return_info`` the call returns ``(images, {"nfe": ...})``. If a list is
    passed as ``trajectory`` the state after every step is appended to it.
    """
    fn, null_class = _resolve(model, null_class)
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    if dtype is None:
        params = getattr(model, "parameters", None)
        first = next(iter(params()), None) if params is not None else None
        dtype = first.dtype if first is not None else torch.float32
    try:
        labels = torch.as_tensor(list(class_ids) if not isinstance(class_ids, Tensor) else class_ids,
                                 dtype=torch.long)
        counter = CallCounter(fn)
        s = cfg.noise_scale if cfg.noise_scale is not None else noise_scale_for(image_size)
        gen = torch.Generator().manual_seed(cfg.seed)
        shape = (labels.shape[0], image_size, image_size, channels)
        z = (s * torch.randn(shape, generator=gen, dtype=torch.float64)).to(dtype)
        if trajectory is not None:
            trajectory.append(z.clone())

        def f(state, t):
            return velocity_field(counter, state, t, labels, cfg.cfg_scale, cfg.cfg_interval,
                                  cfg.velocity_clip, null_class)

        grid = time_grid(cfg.steps)
        for i in range(cfg.steps):
            t, dt = grid[i], grid[i + 1] - grid[i]
            try:
                if cfg.solver == "heun":
                    z = heun_step(f, z, t, dt, final=(i == cfg.steps - 1))
                else:
                    z = euler_step(f, z, t, dt)
                    _check_finite(z, "state")
            except SamplingError as exc:
                raise SamplingError(str(exc), step=i) from exc
            if trajectory is not None:
                trajectory.append(z.clone())
        images = z.clamp(-1.0, 1.0)
    finally:
        if was_training:
            model.train()
    if return_info:
        return images, {"nfe": counter.calls}
    return images


def cfg_sweep(model, scales: Iterable[float], intervals: Iterable[tuple[float, float]],
              eval_fn: Callable[[Tensor], dict], base: SamplerConfig, class_ids: Sequence[int],
              image_size: int, channels: int = 3, null_class: int | None = None) -> list[dict]:
    """Evaluate every (scale, interval) cell with the same seed; rows sorted by
    (cfg_scale, t_lo, t_hi). A failing cell raises :class:`SweepError` carrying the
    rows finished so far."""
    rows: list[dict] = []
    cells = sorted((float(w), float(lo), float(hi)) for w in scales for lo, hi in intervals)
    for w, lo, hi in cells:
        cfg = SamplerConfig(steps=base.steps, cfg_scale=w, cfg_interval=(lo, hi), seed=base.seed,
                            clip=base.clip, solver=base.solver, noise_scale=base.noise_scale)
        try:
            images = sample(model, cfg, class_ids, image_size, channels, null_class)
            metrics = eval_fn(images)
        except Exception as exc:
            raise SweepError(f"cell (w={w}, [{lo}, {hi}]) failed: {exc}", rows) from exc
        rows.append({"cfg_scale": w, "t_lo": lo, "t_hi": hi, **metrics})
    return rows
