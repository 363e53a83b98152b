"""The one-shot export pipeline: images to an embedding container, class
names to a classifier-weight container."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import EMBED_DIM, N_TOKENS, VisionLanguageBackbone, tokens_to_numpy
from .containers import write_embedding_container, write_weight_container
from .errors import BadTemplate, DuplicateEntry, EmptyClassList
from .preprocess import load_image, preprocess_views

PLACEHOLDER = "{CLASS}"
EMBEDDINGS_NAME = "embeddings.mhe1"
WEIGHTS_NAME = "class_weights.mhe1"

# per-attribute prompt templates; entries beyond the platform one follow a
# common "a photo with ..." pattern and are recorded verbatim in the weight
# container for provenance
DEFAULT_TEMPLATES = {
    "platform": "a photo taken on {CLASS}",
    "weather": "a photo with {CLASS} weather",
    "view_direction": "a photo with {CLASS} view direction",
    "lighting_condition": "a photo with {CLASS} lighting",
    "panoramic_status": "a photo with {CLASS} panoramic projection",
    "quality": "a photo with {CLASS} image quality",
    "glare": "a photo with {CLASS} glare",
    "reflection": "a photo with {CLASS} reflection",
}


@dataclass
class ExportSpec:
    images: list[tuple[str, str]]        # (image_id, path) in export order
    attribute: str
    class_names: list[str]
    prompt_template: str
    n_views: int = 3                     # view 0 plus two augmented views
    seed: int = 42
    out_dir: Path = field(default_factory=lambda: Path("."))
    batch_size: int = 16

    def validate(self) -> None:
        if self.n_views < 1:
            raise ValueError("need at least the deterministic view 0")
        if self.prompt_template.count(PLACEHOLDER) != 1:
            raise BadTemplate(
                f"template must contain {PLACEHOLDER} exactly once: "
                f"{self.prompt_template!r}")
        if not self.class_names:
            raise EmptyClassList("no class names given")
        if len(set(self.class_names)) != len(self.class_names):
            raise DuplicateEntry("class names are not unique")
        ids = [image_id for image_id, _ in self.images]
        if len(set(ids)) != len(ids):
            raise DuplicateEntry("image ids are not unique")
        if not ids:
            raise ValueError("no images to export")


def read_image_manifest(path) -> list[tuple[str, str]]:
    """CSV with header ``image_id,path``."""
    entries: list[tuple[str, str]] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["image_id", "path"]:
            raise ValueError(f"{path}: expected header image_id,path, got {header}")
        for row in reader:
            if len(row) != 2 or not row[0]:
                raise ValueError(f"{path}: malformed row {row!r}")
            entries.append((row[0], row[1]))
    return entries


def encode_class_weights(backbone: VisionLanguageBackbone,
                         class_names: list[str], template: str) -> np.ndarray:
    """One joint-space row per class from the frozen text tower."""
    if not class_names:
        raise EmptyClassList("no class names given")
    if template.count(PLACEHOLDER) != 1:
        raise BadTemplate(f"template must contain {PLACEHOLDER} exactly once")
    if len(set(class_names)) != len(class_names):
        raise DuplicateEntry("class names are not unique")
    prompts = [template.replace(PLACEHOLDER, name) for name in class_names]
    return tokens_to_numpy(backbone.encode_text(prompts))


def extract_tokens(backbone: VisionLanguageBackbone,
                   batch: np.ndarray) -> np.ndarray:
    """Projected token embeddings [(n), 197, 512] for a preprocessed batch."""
    with torch.no_grad():
        out = backbone.image_tokens(torch.from_numpy(np.ascontiguousarray(batch)))
    return tokens_to_numpy(out)


def export(spec: ExportSpec, backbone: VisionLanguageBackbone) -> dict:
    """Run the full export; returns the output paths and digests."""
    spec.validate()
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    image_ids = [image_id for image_id, _ in spec.images]
    data = np.empty((len(spec.images), spec.n_views, N_TOKENS, EMBED_DIM),
                    dtype=np.float32)
    pending: list[np.ndarray] = []
    slots: list[tuple[int, int]] = []

    def flush():
        if not pending:
            return
        tokens = extract_tokens(backbone, np.stack(pending))
        for (img_idx, view_idx), toks in zip(slots, tokens):
            data[img_idx, view_idx] = toks
        pending.clear()
        slots.clear()

    for img_idx, (image_id, path) in enumerate(spec.images):
        views = preprocess_views(load_image(path), spec.n_views, spec.seed,
                                 image_id)
        for view_idx in range(spec.n_views):
            pending.append(views[view_idx])
            slots.append((img_idx, view_idx))
            if len(pending) >= spec.batch_size:
                flush()
    flush()

    emb_path = out_dir / EMBEDDINGS_NAME
    emb_digest = write_embedding_container(image_ids, data, emb_path)

    rows = encode_class_weights(backbone, spec.class_names, spec.prompt_template)
    w_path = out_dir / WEIGHTS_NAME
    w_digest = write_weight_container(spec.class_names, rows,
                                      backbone.temperature,
                                      spec.prompt_template, w_path)
    return {
        "embeddings": emb_path, "embeddings_sha256": emb_digest,
        "class_weights": w_path, "class_weights_sha256": w_digest,
        "n_images": len(image_ids), "n_views": spec.n_views,
        "n_tokens": N_TOKENS, "dim": EMBED_DIM,
    }
