import sys
from pathlib import Path

import pytest
import torch

from freqbooster.config import ModelConfig, TrainConfig

sys.path.insert(0, str(Path(__file__).parent))


def tiny_model_config(**overrides) -> ModelConfig:
    """8x8 images, 2 classes; used for training and CLI checks."""
    kw = dict(image_size=8, patch_size=2, channels=3, dit_depth=2, dec_depth=1, dit_dim=32,
              dec_dim=64, heads=4, in_context_start_block=1, irepa_tap_block=1, num_classes=2,
              time_freq_dim=32, dropout=0.0)
    kw.update(overrides)
    return ModelConfig(**kw)


def audit_model_config(**overrides) -> ModelConfig:
    """Under 10k parameters, for finite-difference gradient checks."""
    kw = dict(image_size=4, patch_size=2, channels=3, dit_depth=2, dec_depth=1, dit_dim=8,
              dec_dim=16, heads=2, in_context_start_block=1, irepa_tap_block=1, num_classes=2,
              time_freq_dim=8, dropout=0.0)
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny_train_config(**overrides) -> TrainConfig:
    kw = dict(batch_size=64, noise_scale=1.0, irepa_dim=16, max_steps=2000, seed=0)
    kw.update(overrides)
    return TrainConfig(**kw)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def audit_cfg():
    return audit_model_config()


@pytest.fixture
def tiny_train_cfg():
    return tiny_train_config()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield
