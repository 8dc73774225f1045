"""BlindQE - Shared Test Fixtures"""
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from app.config import Settings
from app.models import ArchConfig
from app.services.dataset_service import DatasetService

TINY = dict(
    latent_dim=8,
    cond_dim=8,
    base_width=4,
    unet_depth=2,
    encoder_stages=2,
    shuffle_factor=2,
    hidden_width=16,
    time_embed_dim=8,
    timesteps=5,
    qp_set="27,37",
    patch_size=16,
    batch_size=2,
    split_ratio=0.5,
    min_plane_size=16,
    stage1_steps=3,
    stage2_steps=3,
    checkpoint_every=2,
    eval_every=2,
    seed=0,
)


def write_rgb(path: Path, seed: int, size: int = 32) -> Path:
    """Smooth gradient plus mild noise, saved as an 8-bit RGB PNG."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    base = 60 + 3 * xx + 2 * yy + 20 * np.sin(xx / (3 + seed))
    rgb = np.stack([base, base * 0.8 + 20, base * 0.6 + 40], axis=-1)
    rgb = rgb + rng.normal(0, 4, rgb.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(rgb, 0, 255).astype(np.uint8)).save(path)
    return path


@pytest.fixture
def tiny_settings() -> Settings:
    return Settings(**TINY)


@pytest.fixture
def tiny_arch(tiny_settings) -> ArchConfig:
    return ArchConfig.from_settings(tiny_settings)


@pytest.fixture
def corpus_dir(tmp_path) -> Path:
    corpus = tmp_path / "corpus"
    write_rgb(corpus / "ClassA" / "seqA.png", seed=1)
    write_rgb(corpus / "ClassA" / "seqB.png", seed=2)
    write_rgb(corpus / "ClassB" / "seqC.png", seed=3)
    return corpus


@pytest.fixture
def dataset(tiny_settings, corpus_dir, tmp_path):
    """(manifest, root) of a proxy-compressed tiny corpus: 2 train sources, 1 val source."""
    root = tmp_path / "data"
    manifest = DatasetService(tiny_settings).build_dataset(corpus_dir, root)
    return manifest, root


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
