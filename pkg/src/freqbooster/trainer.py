"""Training loop, EMA and checkpoint container."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import torch
from safetensors import SafetensorError
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save
from torch import Tensor

from .config import LossWeights, ModelConfig, TrainConfig
from .diffusion import interpolate, noise_scale_for, sample_time
from .losses import (
    LossReport,
    NonFiniteLossError,
    Projector,
    RandomConvExtractor,
    RandomPatchEncoder,
    fm_loss,
    irepa_loss,
    perceptual_loss,
    total_loss,
)
from .model import FrequencyBooster, build_model

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_HEADER = ("step", "fm", "irepa", "perceptual", "total", "lr", "wall_time")


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Objective:
    """Frozen loss machinery: perceptual extractor, reference encoder, weights."""

    extractor: Callable
    encoder: Callable
    weights: LossWeights = field(default_factory=LossWeights)


def build_objective(model_cfg: ModelConfig, train_cfg: TrainConfig,
                    weights: LossWeights = LossWeights()) -> Objective:
    return Objective(
        extractor=RandomConvExtractor(model_cfg.channels, seed=train_cfg.aux_seed),
        encoder=RandomPatchEncoder(model_cfg.patch_size, model_cfg.channels, train_cfg.irepa_dim,
                                   seed=train_cfg.aux_seed + 1),
        weights=weights,
    )


@dataclass
class TrainState:
    model: FrequencyBooster
    ema: FrequencyBooster
    projector: Projector
    optimizer: torch.optim.Adam
    generator: torch.Generator
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    step: int = 0

    def trainable(self) -> list[Tensor]:
        return [*self.model.parameters(), *self.projector.parameters()]


def _make_optimizer(params: Iterable[Tensor], tc: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=tc.lr, betas=(tc.adam_beta1, tc.adam_beta2),
                            eps=tc.adam_eps, weight_decay=tc.weight_decay, foreach=False)


def init_train_state(model_cfg: ModelConfig, train_cfg: TrainConfig,
                     dtype: torch.dtype = torch.float32) -> TrainState:
    model = build_model(model_cfg, seed=train_cfg.seed, dtype=dtype)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train_cfg.seed + 1)
        projector = Projector(model_cfg.dit_dim, train_cfg.irepa_dim).to(dtype)
    ema = copy.deepcopy(model)
    ema.requires_grad_(False)
    ema.eval()
    optimizer = _make_optimizer([*model.parameters(), *projector.parameters()], train_cfg)
    generator = torch.Generator().manual_seed(train_cfg.seed)
    return TrainState(model, ema, projector, optimizer, generator, model_cfg, train_cfg)


@torch.no_grad()
def ema_update(ema_params, params, decay: float):
    """``ema <- decay * ema + (1 - decay) * params`` in place; returns the ema tensors."""
    if isinstance(ema_params, torch.nn.Module):
        ema_params = ema_params.parameters()
    if isinstance(params, torch.nn.Module):
        params = params.parameters()
    ema_params, params = list(ema_params), list(params)
    if len(ema_params) != len(params):
        raise ValueError(f"EMA holds {len(ema_params)} tensors, model has {len(params)}")
    for e, p in zip(ema_params, params):
        if e.shape != p.shape:
            raise ValueError(f"EMA shape {tuple(e.shape)} != parameter shape {tuple(p.shape)}")
    for e, p in zip(ema_params, params):
        e.mul_(decay).add_(p, alpha=1 - decay)
    return ema_params


def train_step(state: TrainState, batch: tuple[Tensor, Tensor], objective: Objective):
    """One optimisation step on ``batch = (images, labels)``; returns ``(state, LossReport)``.

    Randomness (time, noise, label drop, dropout masks) all comes from
    ``state.generator``. A non-finite loss raises before anything is mutated.
    """
    mc, tc = state.model_cfg, state.train_cfg
    dtype = next(state.model.parameters()).dtype
    x, labels = batch
    x = x.to(dtype)
    labels = labels.to(torch.long)
    g = state.generator
    saved_rng = g.get_state()
    n = x.shape[0]

    t = sample_time(g, tc.time_sampler, (n,), dtype)
    eps = torch.randn(x.shape, generator=g, dtype=torch.float64).to(dtype)
    drop = torch.rand(n, generator=g, dtype=torch.float64) < tc.class_drop_prob
    labels = torch.where(drop, torch.full_like(labels, mc.null_class), labels)
    dropout_seed = int(torch.randint(0, 2**62, (1,), generator=g))
    s = tc.noise_scale if tc.noise_scale is not None else noise_scale_for(mc.image_size)
    sample = interpolate(x, eps, t, s)

    state.model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(dropout_seed)
        x_pred, tapped = state.model(sample.z_t, t, labels)
    fm = fm_loss(x_pred, x, t, tc.velocity_clip)
    ir = irepa_loss(tapped, objective.encoder(x), state.projector)
    pc = perceptual_loss(x_pred, x, objective.extractor)
    try:
        report = total_loss(fm, ir, pc, objective.weights)
    except NonFiniteLossError:
        g.set_state(saved_rng)
        raise

    state.optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    state.optimizer.step()
    ema_update(state.ema, state.model, tc.ema_decay)
    state.step += 1
    detached = LossReport(*(v.detach() for v in (report.fm, report.irepa, report.perceptual,
                                                 report.total)))
    return state, detached


def draw_batch(state: TrainState, images: Tensor, labels: Tensor):
    n = images.shape[0]
    idx = torch.randperm(n, generator=state.generator)[: min(state.train_cfg.batch_size, n)]
    return images[idx], labels[idx]


def train(state: TrainState, images: Tensor, labels: Tensor, objective: Objective,
          steps: int | None = None, out_dir: str | os.PathLike | None = None,
          on_step: Callable[[TrainState, LossReport], None] | None = None) -> list[dict]:
    """Run ``steps`` optimisation steps (default: up to ``max_steps``).

    With ``out_dir`` a metrics CSV is appended every ``log_every`` steps and a
    checkpoint written every ``ckpt_every`` steps plus at the end.
    """
    tc = state.train_cfg
    steps = tc.max_steps - state.step if steps is None else steps
    history = []
    metrics_path = ckpt_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    start = time.perf_counter()
    for _ in range(steps):
        batch = draw_batch(state, images, labels)
        state, report = train_step(state, batch, objective)
        row = {"step": state.step, **report.as_floats()}
        history.append(row)
        if on_step is not None:
            on_step(state, report)
        if metrics_path is not None and state.step % tc.log_every == 0:
            append_metrics(metrics_path, row, tc.lr, time.perf_counter() - start)
        if ckpt_dir is not None and state.step % tc.ckpt_every == 0:
            save_checkpoint(state, ckpt_dir / f"step_{state.step:07d}.safetensors")
    if ckpt_dir is not None:
        save_checkpoint(state, ckpt_dir / "last.safetensors")
    return history


def append_metrics(path: Path, row: dict, lr: float, wall_time: float):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerow([row["step"], f"{row['fm']:.8g}", f"{row['irepa']:.8g}",
                         f"{row['perceptual']:.8g}", f"{row['total']:.8g}", lr, f"{wall_time:.3f}"])


# -- checkpoint container ----------------------------------------------------
#
# A safetensors archive. Tensor names: ``model.*``, ``ema.*``, ``projector.*``,
# ``optim.<index>.<exp_avg|exp_avg_sq|step>`` and ``rng.state``. A single
# metadata entry ``freqbooster`` holds canonical JSON with the format version,
# step and both config echoes.


def _config_dict(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def checkpoint_tensors(state: TrainState) -> tuple[dict[str, Tensor], dict]:
    tensors: dict[str, Tensor] = {}
    for prefix, module in (("model", state.model), ("ema", state.ema),
                           ("projector", state.projector)):
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value.detach().clone().contiguous()
    for idx, slot in state.optimizer.state_dict()["state"].items():
        for key, value in slot.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value).detach().clone().contiguous()
    tensors["rng.state"] = state.generator.get_state().clone()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "model_config": _config_dict(state.model_cfg),
        "train_config": _config_dict(state.train_cfg),
    }
    return tensors, meta


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    """Atomic write (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, meta = checkpoint_tensors(state)
    blob = st_save(tensors, metadata={"freqbooster": json.dumps(meta, sort_keys=True)})
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], dict]:
    """Raw tensors and metadata; raises a :class:`CheckpointError` subclass on bad input."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        tensors = st_load(blob)
        header_len = int.from_bytes(blob[:8], "little")
        header = json.loads(blob[8:8 + header_len])
        meta = json.loads(header["__metadata__"]["freqbooster"])
    except (SafetensorError, ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )
    return tensors, meta


def load_checkpoint(path: str | os.PathLike, model_cfg: ModelConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`. If ``model_cfg`` is given it must match the echo."""
    tensors, meta = read_checkpoint(path)
    try:
        echo = ModelConfig(**meta["model_config"])
        train_cfg = TrainConfig(**meta["train_config"])
    except (TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"bad config echo in {path}: {exc}") from exc
    if model_cfg is not None and model_cfg != echo:
        diffs = [f.name for f in dataclasses.fields(ModelConfig)
                 if getattr(model_cfg, f.name) != getattr(echo, f.name)]
        raise ConfigMismatchError(f"checkpoint model config differs in: {', '.join(diffs)}")

    dtype = tensors["model.x_embed.weight"].dtype
    state = init_train_state(echo, train_cfg, dtype=dtype)
    try:
        for prefix, module in (("model", state.model), ("ema", state.ema),
                               ("projector", state.projector)):
            sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            module.load_state_dict(sd, strict=True)
        opt_sd = state.optimizer.state_dict()
        slots: dict[int, dict] = {}
        for key, value in tensors.items():
            if key.startswith("optim."):
                _, idx, name = key.split(".", 2)
                slots.setdefault(int(idx), {})[name] = value
        opt_sd["state"] = slots
        state.optimizer.load_state_dict(opt_sd)
        state.generator.set_state(tensors["rng.state"])
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"checkpoint tensors do not fit the model: {exc}") from exc
    state.step = int(meta["step"])
    return state
