"""Writers for the shared little-endian binary container layout.

Layout: magic ``MHE1``; u32 version (=1); u32 n_images; u32 n_views; u32
n_tokens; u32 dim; u32 dtype (0 = float32); u32 flags (bit 0: a float32
temperature follows); raw float32 payload in image, view, token, feature
order. Sidecar ``<container>.ids`` lists one record id (or class name) per
line. Weight containers use n_views = n_tokens = 1 and carry the temperature;
their ``<container>.meta.json`` records the prompt template. Every container
gets a ``<container>.sha256`` digest file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DuplicateEntry

MAGIC = b"MHE1"
VERSION = 1
DTYPE_FLOAT32 = 0
FLAG_TEMPERATURE = 1

_HEADER = struct.Struct("<4sIIIIIII")


def _write_sidecar(path: Path, lines: list[str]) -> None:
    path.with_name(path.name + ".ids").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8")


def write_digest(path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    Path(path).with_name(Path(path).name + ".sha256").write_text(
        digest + "\n", encoding="utf-8")
    return digest


def write_embedding_container(image_ids: list[str], data: np.ndarray,
                              path) -> str:
    """Write [n_images, n_views, n_tokens, dim] float32 embeddings plus the
    id sidecar and digest file. Returns the container digest."""
    if len(set(image_ids)) != len(image_ids):
        raise DuplicateEntry("image ids are not unique")
    n_images, n_views, n_tokens, dim = data.shape
    if len(image_ids) != n_images:
        raise ValueError(f"{len(image_ids)} ids for {n_images} records")
    path = Path(path)
    header = _HEADER.pack(MAGIC, VERSION, n_images, n_views, n_tokens, dim,
                          DTYPE_FLOAT32, 0)
    path.write_bytes(header + np.ascontiguousarray(data, dtype="<f4").tobytes())
    _write_sidecar(path, list(image_ids))
    return write_digest(path)


def write_weight_container(class_names: list[str], weights: np.ndarray,
                           temperature: float, prompt_template: str,
                           path) -> str:
    if len(set(class_names)) != len(class_names):
        raise DuplicateEntry("class names are not unique")
    k, dim = weights.shape
    if len(class_names) != k:
        raise ValueError(f"{len(class_names)} names for {k} rows")
    path = Path(path)
    header = _HEADER.pack(MAGIC, VERSION, k, 1, 1, dim, DTYPE_FLOAT32,
                          FLAG_TEMPERATURE)
    header += struct.pack("<f", float(temperature))
    path.write_bytes(header + np.ascontiguousarray(weights, dtype="<f4").tobytes())
    _write_sidecar(path, list(class_names))
    path.with_name(path.name + ".meta.json").write_text(
        json.dumps({"prompt_template": prompt_template}, sort_keys=True) + "\n",
        encoding="utf-8")
    return write_digest(path)
