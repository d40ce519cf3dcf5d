from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from portraitqa.config import (
    BackboneSettings,
    BranchFlags,
    PreprocessSettings,
    TrainConfig,
)
from portraitqa.synthetic import generate_synthetic_dataset


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small synthetic dataset: 3 scenes, 4 train + 3 val records each."""
    root = tmp_path_factory.mktemp("toydata")
    manifest = generate_synthetic_dataset(root, n_scenes=3, train_per_scene=4,
                                          val_per_scene=3, seed=11)
    return root, manifest


def make_toy_config(manifest, output_dir, **overrides) -> TrainConfig:
    """Config sized for seconds-scale CPU runs."""
    base = dict(
        attribute="overall",
        manifest=str(manifest),
        output_dir=str(output_dir),
        seed=7,
        deterministic=True,
        epochs=2,
        batch_size=6,
        branches=BranchFlags(use_full=True, use_facial=True, use_liqe=True),
        preprocess=PreprocessSettings(resize_min_dim=64, crop_size=48),
        backbone=BackboneSettings(name="toy", feature_dim=16),
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


@pytest.fixture
def toy_config(toy_dataset, tmp_path):
    _, manifest = toy_dataset
    return make_toy_config(manifest, tmp_path / "run")


def checkerboard_image(width: int, height: int, seed: int = 0) -> Image.Image:
    """RGB image with position-dependent pixels, for crop-window checks."""
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 255, size=(height, width, 3), dtype=np.uint8)
    xs = np.arange(width, dtype=np.uint32)
    ys = np.arange(height, dtype=np.uint32)
    base[..., 0] = (xs[None, :] * 7 + ys[:, None] * 13) % 251
    return Image.fromarray(base, mode="RGB")
