"""Desk-scale pixel-space diffusion: DiT backbone, width-expanded decoder, fusion head."""

from .config import (
    ConfigError,
    DatasetSpec,
    ExperimentConfig,
    LossWeights,
    ModelConfig,
    SamplerConfig,
    TimeSamplerConfig,
    TrainConfig,
    VelocityClipConfig,
    emit_config,
    parse_config,
    preset,
)
from .diffusion import DiffusionSample, interpolate, noise_scale_for, sample_time, x_to_velocity
from .model import FrequencyBooster, TokenSequence, build_model, patchify, unpatchify
from .sampler import heun_step, sample, velocity_field

__version__ = "0.1.0"
