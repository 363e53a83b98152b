"""Image decoding and model-ready preprocessing.

View 0 is the deterministic path: a straight 224x224 bicubic resize plus
channel normalization with the pretrained backbone's constants. Later views
add the stochastic augmentations (random crop out of a 256x256 resize and a
coin-flip horizontal mirror) seeded per (run seed, image id, view index), so
re-exports are bit-stable.
"""

from __future__ import annotations

import zlib

import numpy as np
from PIL import Image

from .errors import UndecodableImage

TARGET_SIZE = 224
CROP_SOURCE_SIZE = 256
# channel statistics the backbone was pretrained with
CHANNEL_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
CHANNEL_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)


def load_image(path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as exc:
        raise UndecodableImage(f"{path}: {exc}") from exc


def view_rng(seed: int, image_id: str, view_index: int) -> np.random.Generator:
    mix = zlib.crc32(image_id.encode("utf-8"), zlib.crc32(bytes([view_index & 0xFF])))
    return np.random.default_rng(np.random.SeedSequence([int(seed), mix, view_index]))


def _normalize(image: Image.Image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float32) / 255.0    # [h, w, 3]
    arr = (arr - CHANNEL_MEAN) / CHANNEL_STD
    return arr.transpose(2, 0, 1)                        # [3, h, w]


def preprocess(image: Image.Image, view_index: int, seed: int,
               image_id: str) -> np.ndarray:
    """One model-ready [3, 224, 224] float32 view of a decoded image."""
    if view_index == 0:
        resized = image.resize((TARGET_SIZE, TARGET_SIZE), Image.BICUBIC)
        return _normalize(resized)
    rng = view_rng(seed, image_id, view_index)
    enlarged = image.resize((CROP_SOURCE_SIZE, CROP_SOURCE_SIZE), Image.BICUBIC)
    span = CROP_SOURCE_SIZE - TARGET_SIZE
    left = int(rng.integers(0, span + 1))
    top = int(rng.integers(0, span + 1))
    cropped = enlarged.crop((left, top, left + TARGET_SIZE, top + TARGET_SIZE))
    if rng.random() < 0.5:
        cropped = cropped.transpose(Image.FLIP_LEFT_RIGHT)
    return _normalize(cropped)


def preprocess_views(image: Image.Image, n_views: int, seed: int,
                     image_id: str) -> np.ndarray:
    """All views stacked as [n_views, 3, 224, 224]."""
    return np.stack([preprocess(image, v, seed, image_id) for v in range(n_views)])
