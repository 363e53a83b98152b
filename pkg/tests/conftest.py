"""Shared builders for synthetic embedding sets, classifier weights, and the
separable training task used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from patchadapter.dataio import ClassifierWeights, EmbeddingSet, LabelTable


def make_embedding_set(n_images=4, n_views=1, n_tokens=5, dim=8, seed=0,
                       ids=None) -> EmbeddingSet:
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(n_images, n_views, n_tokens, dim)).astype(np.float32)
    ids = ids if ids is not None else [f"img{i:03d}" for i in range(n_images)]
    return EmbeddingSet(image_ids=ids, data=data)


def make_weights(k=3, dim=8, seed=1, temperature=0.01) -> ClassifierWeights:
    rng = np.random.default_rng(seed)
    return ClassifierWeights(
        class_names=[f"class{i}" for i in range(k)],
        weights=rng.normal(size=(k, dim)).astype(np.float32),
        temperature=temperature,
        prompt_template="a photo of {CLASS}")


def build_separable_task(seed=123, n_samples=200, k=4, dim=32, n_patches=9,
                         noise=0.3):
    """Classification task where the class mean is added to every patch token,
    so a linear rule on the pooled tokens separates the classes."""
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(k, dim)).astype(np.float32)
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    ids, data, labels = [], [], {}
    for i in range(n_samples):
        cls = i % k
        tokens = rng.normal(0.0, noise, size=(n_patches + 1, dim)).astype(np.float32)
        tokens[1:] += means[cls]
        ids.append(f"img{i:03d}")
        data.append(tokens)
        labels[f"img{i:03d}"] = cls
    embeddings = EmbeddingSet(image_ids=ids, data=np.stack(data)[:, None, :, :])
    weights = ClassifierWeights(
        class_names=[f"c{i}" for i in range(k)],
        weights=rng.normal(size=(k, dim)).astype(np.float32),
        temperature=0.01)
    return embeddings, LabelTable(entries=labels), weights


@pytest.fixture
def tiny_embeddings():
    return make_embedding_set()


@pytest.fixture
def tiny_weights():
    return make_weights()
