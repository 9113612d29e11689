"""
Pytest Configuration and Fixtures

Provides shared fixtures for all tests including:
- Seeded random generators
- Miniature model configurations (gradient checks, overfit runs)
- Labelled patches with hand-placed tracks
- Small regular-grid imager scenes
- Synthetic corpora written to temporary CPTX files
"""

import os
import sys
from fractions import Fraction

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.model_service import ModelConfig  # noqa: E402
from utils.containers import UNLABELED, LabeledPatch  # noqa: E402
from utils.scene_io import ImagerScene  # noqa: E402


# ============================================================
# Randomness
# ============================================================

@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# ============================================================
# Model Configurations
# ============================================================

@pytest.fixture
def grad_config() -> ModelConfig:
    """
    Smallest network that still exercises every block: 2 input channels,
    4 layers, two scales, smooth activation for finite differences.
    """
    return ModelConfig(
        in_channels=2,
        embed_dim=3,
        height_dim=4,
        num_classes=4,
        scales=(Fraction(1), Fraction(1, 2)),
        encoder_depth=2,
        gen_channels=2,
        activation="tanh",
    )


@pytest.fixture
def mini_config() -> ModelConfig:
    """Desk-scale network on the full 20-channel, 38-layer data layout."""
    return ModelConfig(
        in_channels=20,
        embed_dim=8,
        height_dim=38,
        scales=(Fraction(1), Fraction(1, 2)),
        encoder_depth=2,
        gen_channels=8,
    )


# ============================================================
# Patches
# ============================================================

def make_patch(
    size: int = 8,
    num_layers: int = 38,
    n_spectral: int = 16,
    n_aux: int = 4,
    track: list | None = None,
    seed: int = 0,
    dense: bool = True,
    timestamp: float = 0.0,
) -> LabeledPatch:
    """
    Random channels plus a random dense phase volume; the track pixels
    (default: the main diagonal) carry their dense labels.
    """
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 4, size=(num_layers, size, size)).astype(np.uint8)
    mask = np.zeros((size, size), dtype=bool)
    for r, c in track if track is not None else [(i, i) for i in range(size)]:
        mask[r, c] = True
    labels = np.full_like(truth, UNLABELED)
    labels[:, mask] = truth[:, mask]
    channels = rng.uniform(0.0, 1.0, size=(n_spectral, size, size))
    channels[6:] = rng.uniform(220.0, 290.0, size=(max(n_spectral - 6, 0), size, size))
    return LabeledPatch(
        channels=channels,
        aux=rng.uniform(-1.0, 1.0, size=(n_aux, size, size)),
        labels=labels,
        mask=mask,
        dense=truth if dense else None,
        timestamp=timestamp,
    )


@pytest.fixture
def patch_factory():
    return make_patch


@pytest.fixture
def small_patches() -> list[LabeledPatch]:
    return [make_patch(size=8, seed=i, timestamp=600.0 * i) for i in range(4)]


# ============================================================
# Scenes
# ============================================================

def make_scene(
    height: int = 32,
    width: int = 32,
    lat0: float = 10.0,
    lon0: float = 120.0,
    step: float = 0.02,
    timestamp: float = 1483228800.0,
    name: str = "scene",
    seed: int = 0,
) -> ImagerScene:
    """Regular grid, latitude decreasing down the rows."""
    rng = np.random.default_rng(seed)
    lat = np.repeat((lat0 - step * np.arange(height))[:, None], width, axis=1)
    lon = np.repeat((lon0 + step * np.arange(width))[None, :], height, axis=0)
    channels = rng.uniform(0.0, 1.0, size=(16, height, width)).astype(np.float32)
    channels[6:] = rng.uniform(220.0, 290.0, size=(10, height, width))
    return ImagerScene(
        timestamp=timestamp,
        lat=lat,
        lon=lon,
        channels=channels,
        sat_zenith=np.full((height, width), 30.0),
        sol_zenith=np.full((height, width), 40.0),
        night=np.zeros((height, width), dtype=bool),
        name=name,
    )


@pytest.fixture
def scene_factory():
    return make_scene


@pytest.fixture
def synth_file(tmp_path):
    """Path to a small synthetic CPTX corpus (10 patches of 16x16)."""
    from services.synth_service import make_patches
    from utils.containers import write_patches

    path = tmp_path / "synth.cptx"
    write_patches(path, make_patches(10, size=16, seed=7))
    return path
