"""Frozen vision-language backbone: a ViT-B/16 image tower with a joint
512-dimensional projection and a causal text transformer.

The image tower splits a 224x224 image into 196 patches, prepends a class
token, and runs pre-norm transformer blocks; every token (not only the class
token) is passed through the final layer norm and the visual projection, so
patch embeddings live in the same joint space as the text-derived classifier
rows. ``encode_image`` is the standard global-embedding path and equals token
0 of ``image_tokens`` up to float ordering.

Profiles:

* ``vit-b-16``        full-depth tower; requires a ``--weights`` state dict
                      saved for this module structure.
* ``vit-b-16-seeded`` full-depth tower with deterministic seeded random
                      weights (no pretraining; for pipeline validation).
* ``test-small``      same widths and token geometry, two blocks per tower;
                      deterministic seeded weights, meant for tests.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import BackboneUnavailable

IMAGE_SIZE = 224
PATCH_SIZE = 16
VISUAL_WIDTH = 768
EMBED_DIM = 512
TEXT_WIDTH = 512
CONTEXT_LENGTH = 77
VOCAB_SIZE = 49408
SOT_TOKEN = VOCAB_SIZE - 2
EOT_TOKEN = VOCAB_SIZE - 1

N_PATCHES = (IMAGE_SIZE // PATCH_SIZE) ** 2  # 196
N_TOKENS = N_PATCHES + 1                     # 197


def tokenize(texts: list[str], context_length: int = CONTEXT_LENGTH) -> torch.Tensor:
    """Deterministic hashing tokenizer: lowercased words map to stable ids.

    A stand-in for a trained BPE vocabulary; stable across runs and platforms,
    which is all the frozen-export contract needs.
    """
    out = torch.zeros((len(texts), context_length), dtype=torch.long)
    for row, text in enumerate(texts):
        words = [w for w in "".join(
            c if c.isalnum() else " " for c in text.lower()).split() if w]
        ids = [1 + zlib.crc32(w.encode("utf-8")) % (VOCAB_SIZE - 3) for w in words]
        ids = [SOT_TOKEN] + ids[: context_length - 2] + [EOT_TOKEN]
        out[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        b, t, c = x.shape
        d_k = c // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.heads, d_k).transpose(1, 2)
        k = k.view(b, t, self.heads, d_k).transpose(1, 2)
        v = v.view(b, t, self.heads, d_k).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
        if causal:
            mask = torch.full((t, t), float("-inf")).triu(1)
            scores = scores + mask
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, t, c)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), QuickGELU(), nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), causal=causal)
        return x + self.mlp(self.ln_2(x))


class VisionTower(nn.Module):
    def __init__(self, layers: int, heads: int = 12):
        super().__init__()
        self.conv1 = nn.Conv2d(3, VISUAL_WIDTH, PATCH_SIZE, PATCH_SIZE, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(VISUAL_WIDTH))
        self.positional_embedding = nn.Parameter(torch.zeros(N_TOKENS, VISUAL_WIDTH))
        self.ln_pre = nn.LayerNorm(VISUAL_WIDTH)
        self.blocks = nn.ModuleList(Block(VISUAL_WIDTH, heads) for _ in range(layers))
        self.ln_post = nn.LayerNorm(VISUAL_WIDTH)
        self.proj = nn.Parameter(torch.zeros(VISUAL_WIDTH, EMBED_DIM))

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Pre-projection token features [b, 197, width]."""
        x = self.conv1(images)                      # [b, width, 14, 14]
        x = x.flatten(2).transpose(1, 2)            # [b, 196, width]
        cls = self.class_embedding.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        x = self.ln_pre(x)
        for block in self.blocks:
            x = block(x)
        return x


class TextTower(nn.Module):
    def __init__(self, layers: int, heads: int = 8):
        super().__init__()
        self.token_embedding = nn.Embedding(VOCAB_SIZE, TEXT_WIDTH)
        self.positional_embedding = nn.Parameter(torch.zeros(CONTEXT_LENGTH, TEXT_WIDTH))
        self.blocks = nn.ModuleList(Block(TEXT_WIDTH, heads) for _ in range(layers))
        self.ln_final = nn.LayerNorm(TEXT_WIDTH)
        self.proj = nn.Parameter(torch.zeros(TEXT_WIDTH, EMBED_DIM))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.token_embedding(tokens) + self.positional_embedding
        for block in self.blocks:
            x = block(x, causal=True)
        x = self.ln_final(x)
        eot = tokens.argmax(dim=-1)  # EOT carries the largest id of the row
        return x[torch.arange(x.shape[0]), eot] @ self.proj


@dataclass
class Profile:
    visual_layers: int
    text_layers: int
    needs_weights: bool


PROFILES = {
    "vit-b-16": Profile(visual_layers=12, text_layers=12, needs_weights=True),
    "vit-b-16-seeded": Profile(visual_layers=12, text_layers=12, needs_weights=False),
    "test-small": Profile(visual_layers=2, text_layers=2, needs_weights=False),
}


class VisionLanguageBackbone(nn.Module):
    """Frozen image and text encoders sharing the joint embedding space."""

    def __init__(self, visual_layers: int, text_layers: int):
        super().__init__()
        self.visual = VisionTower(visual_layers)
        self.text = TextTower(text_layers)
        # temperature 0.01 once inverted, the scale a trained model settles at
        self.logit_scale = nn.Parameter(torch.tensor(math.log(100.0)))

    @torch.no_grad()
    def image_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """All tokens projected into the joint space, [b, 197, 512]; the class
        token sits at index 0."""
        feats = self.visual.features(images)
        return self.visual.ln_post(feats) @ self.visual.proj

    @torch.no_grad()
    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """Standard global image embedding [b, 512]."""
        feats = self.visual.features(images)
        return self.visual.ln_post(feats[:, 0]) @ self.visual.proj

    @torch.no_grad()
    def encode_text(self, texts: list[str]) -> torch.Tensor:
        return self.text(tokenize(texts))

    @property
    def temperature(self) -> float:
        return float(1.0 / torch.exp(self.logit_scale.detach()))


def _seeded_init(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name == "logit_scale":
                continue
            if ".ln_" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            elif name.endswith(".proj"):  # the two joint-space projections
                param.normal_(0.0, param.shape[0] ** -0.5, generator=gen)
            else:
                param.normal_(0.0, 0.02, generator=gen)


def load_backbone(profile: str = "vit-b-16", weights_path=None,
                  seed: int = 0) -> VisionLanguageBackbone:
    """Build a frozen backbone for the named profile.

    ``vit-b-16`` loads a state dict from ``weights_path``; the seeded profiles
    fill the same architecture deterministically from ``seed``.
    """
    if profile not in PROFILES:
        raise BackboneUnavailable(
            f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
    spec = PROFILES[profile]
    model = VisionLanguageBackbone(spec.visual_layers, spec.text_layers)
    if spec.needs_weights:
        if weights_path is None:
            raise BackboneUnavailable(
                f"profile {profile!r} requires pretrained weights; pass a "
                "state-dict path")
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    else:
        _seeded_init(model, seed)
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model


def tokens_to_numpy(tokens: torch.Tensor) -> np.ndarray:
    return tokens.detach().cpu().numpy().astype(np.float32)
