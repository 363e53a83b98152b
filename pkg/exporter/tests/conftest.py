"""Shared fixtures: deterministic test images and a small seeded backbone."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from patchexport.backbone import load_backbone


def paint_image(path, seed=0, size=96):
    """A deterministic RGB test image with structure (not flat noise)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    base = np.stack([
        (xx * 255 / size),
        (yy * 255 / size),
        ((xx + yy) * 255 / (2 * size)),
    ], axis=-1)
    noise = rng.integers(0, 60, size=(size, size, 3))
    img = np.clip(base + noise, 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)
    return path


def symmetric_image(path, size=96):
    """Horizontally mirror-symmetric image: flipping it is a no-op."""
    rng = np.random.default_rng(7)
    half = rng.integers(0, 255, size=(size, size // 2, 3)).astype(np.uint8)
    full = np.concatenate([half, half[:, ::-1]], axis=1)
    Image.fromarray(full).save(path)
    return path


@pytest.fixture(scope="session")
def small_backbone():
    return load_backbone("test-small", seed=0)


@pytest.fixture
def image_dir(tmp_path):
    paths = [paint_image(tmp_path / f"img{i}.png", seed=i) for i in range(3)]
    return tmp_path, paths
