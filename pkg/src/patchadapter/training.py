"""Imbalance-aware weighted cross-entropy, AdamW with linear warmup plus
cosine annealing, early stopping, and the full fit loop.

The loop is sequential over batches; within a batch the per-sample gradients
are summed in sample-index order, so a fixed seed reproduces every float of
the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import AdapterParams, adapter_backward, adapter_forward, init_adapter_params
from .dataio import ClassifierWeights, EmbeddingSet, LabelTable, SplitAssignment
from .errors import (
    EmptyTrainSet,
    ShapeMismatch,
    UnknownAttribute,
    UnknownImageId,
    ZeroCount,
)
from .seeding import stream


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    warmup_start_lr: float = 1e-5
    warmup_epochs: int = 5
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 256
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weighting_mode: str = "uniform"   # "uniform" | "inverse"
    seed: int = 42
    alpha: float = 0.8
    heads: int = 4
    bottleneck: int | None = None     # defaults to dim // 4 at fit time
    dropout_p: float = 0.1
    use_bias: bool = False
    ln_eps: float = 1e-5
    cosine_mode: bool = True

    def validate(self) -> None:
        if self.warmup_epochs >= self.max_epochs:
            raise ValueError("warmup_epochs must be < max_epochs")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.warmup_start_lr <= self.peak_lr:
            raise ValueError("need 0 < warmup_start_lr <= peak_lr")
        if self.weighting_mode not in ("uniform", "inverse"):
            raise ValueError(f"unknown weighting mode {self.weighting_mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha outside [0, 1]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p outside [0, 1)")


@dataclass
class ClassWeightVector:
    """Per-class loss weights. Uniform mode stores 1.0 per class: the loss
    normalizes by the weight sum, and with unit weights the weighted sum and
    the plain batch mean share every floating-point operation, so the two
    loss definitions agree bit for bit."""

    weights: np.ndarray


def uniform_weights(n_classes: int) -> ClassWeightVector:
    return ClassWeightVector(weights=np.ones(n_classes, dtype=np.float64))


def inverse_frequency_weights(class_counts) -> ClassWeightVector:
    """Weights proportional to 1/n_c, normalized to sum to 1."""
    counts = np.asarray(class_counts, dtype=np.int64)
    if counts.size == 0 or np.any(counts < 1):
        raise ZeroCount(f"every class needs at least one sample, got {counts}")
    inv = 1.0 / counts.astype(np.float64)
    return ClassWeightVector(weights=inv / inv.sum())


def weighted_cross_entropy(probabilities: np.ndarray, targets,
                           class_weights: ClassWeightVector):
    """Weighted negative log-likelihood, normalized by the batch weight sum.

    Returns (loss, gradient on logits): the gradient row for sample i is
    (p_i - onehot(c_i)) * w(c_i) / sum_j w(c_j), matching the softmax that
    produced the probabilities. Log arguments are clamped at 1e-12.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise ShapeMismatch(f"probabilities {probs.shape} vs targets {targets.shape}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-4):
        raise ValueError("probability rows must sum to 1")
    rows = np.arange(probs.shape[0])
    w = class_weights.weights[targets]
    w_sum = np.sum(w)
    log_p = np.log(np.maximum(probs[rows, targets], 1e-12))
    loss = -np.sum(w * log_p) / w_sum
    grad = probs.copy()
    grad[rows, targets] -= 1.0
    grad *= (w / w_sum)[:, None]
    return float(loss), grad


def lr_at_epoch(epoch, config: TrainConfig) -> float:
    """Linear warmup from warmup_start_lr to peak_lr over warmup_epochs, then
    cosine annealing from peak_lr to 0 at max_epochs. Both branches give
    peak_lr at the boundary."""
    if epoch < 0 or epoch >= config.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.max_epochs})")
    if epoch < config.warmup_epochs:
        span = config.peak_lr - config.warmup_start_lr
        return config.warmup_start_lr + span * epoch / config.warmup_epochs
    progress = (epoch - config.warmup_epochs) / (config.max_epochs - config.warmup_epochs)
    return config.peak_lr * (1.0 + math.cos(math.pi * progress)) / 2.0


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float
    is_best: bool


@dataclass
class TrainState:
    params: AdapterParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    epoch: int = 0
    best_val_accuracy: float = -math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    history: list[EpochStats] = field(default_factory=list)
    shuffle_rng: np.random.Generator | None = None
    dropout_rng: np.random.Generator | None = None

    @classmethod
    def fresh(cls, params: AdapterParams) -> "TrainState":
        tensors = params.tensors()
        return cls(params=params,
                   m={n: np.zeros_like(t) for n, t in tensors.items()},
                   v={n: np.zeros_like(t) for n, t in tensors.items()})


def _adamw_tensor_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray,
                         v: np.ndarray, t: int, lr: float, beta1: float,
                         beta2: float, eps: float, weight_decay: float) -> None:
    """One decoupled-decay Adam update, in place. Decay is applied to the
    parameter directly, separately from the bias-corrected moment step."""
    if weight_decay != 0.0:
        theta -= lr * weight_decay * theta
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adamw_step(state: TrainState, gradients: dict[str, np.ndarray], lr: float,
               config: TrainConfig) -> TrainState:
    """Apply one optimizer step over every trainable tensor, in canonical
    tensor order. Increments the step counter exactly once."""
    tensors = state.params.tensors()
    if set(gradients) != set(tensors):
        raise ShapeMismatch(f"gradient keys {sorted(gradients)} vs tensors {sorted(tensors)}")
    state.t += 1
    for name, theta in tensors.items():
        grad = gradients[name]
        if grad.shape != theta.shape:
            raise ShapeMismatch(f"{name}: grad {grad.shape} vs param {theta.shape}")
        _adamw_tensor_update(theta, grad, state.m[name], state.v[name],
                             state.t, lr, config.adam_beta1, config.adam_beta2,
                             config.adam_eps, config.weight_decay)
    return state


def class_counts(labels: LabelTable, ids, n_classes: int) -> np.ndarray:
    """Occurrences of each class among the given ids (the training partition;
    validation labels never influence the loss weights)."""
    idx = np.array([labels.entries[i] for i in ids], dtype=np.int64)
    return np.bincount(idx, minlength=n_classes)


def _resolve_class_weights(config: TrainConfig, counts: np.ndarray) -> ClassWeightVector:
    if config.weighting_mode == "inverse":
        return inverse_frequency_weights(counts)
    return uniform_weights(len(counts))


def fit(embeddings: EmbeddingSet, labels: LabelTable,
        weights: ClassifierWeights, split: SplitAssignment,
        config: TrainConfig):
    """Train the head and return (best parameters, per-epoch history).

    Each epoch shuffles the training ids, samples one augmentation view per
    image, and runs forward/backward/AdamW over batches; validation accuracy
    is then measured in eval mode on view 0. The checkpoint with the highest
    validation accuracy is retained (ties keep the earlier epoch) and training
    stops after ``patience`` epochs without improvement. With an empty
    validation list there is nothing to select on: every epoch counts as an
    improvement (logged accuracy 0.0), so the full epoch budget runs and the
    final parameters are returned.
    """
    config.validate()
    for image_id in list(split.train_ids) + list(split.val_ids):
        if image_id not in labels.entries:
            raise UnknownImageId(f"split id {image_id!r} has no label")
        try:
            embeddings.index_of(image_id)
        except KeyError:
            raise UnknownImageId(f"split id {image_id!r} has no embedding") from None
    if not split.train_ids:
        raise EmptyTrainSet("empty training partition")
    if weights.dim != embeddings.dim:
        raise ShapeMismatch(f"weights dim {weights.dim} vs embeddings dim {embeddings.dim}")

    n_classes = weights.n_classes
    counts = class_counts(labels, split.train_ids, n_classes)
    class_weights = _resolve_class_weights(config, counts)

    bottleneck = config.bottleneck if config.bottleneck else embeddings.dim // 4
    params = init_adapter_params(
        dim=embeddings.dim, bottleneck=bottleneck, heads=config.heads,
        alpha=config.alpha, dropout_p=config.dropout_p, ln_eps=config.ln_eps,
        use_bias=config.use_bias, rng=stream(config.seed, "init"))
    state = TrainState.fresh(params)
    state.shuffle_rng = stream(config.seed, "shuffle")
    state.dropout_rng = stream(config.seed, "dropout")

    train_ids = list(split.train_ids)
    val_ids = list(split.val_ids)
    val_targets = np.array([labels.entries[i] for i in val_ids], dtype=np.int64)
    best_params = params.copy()

    def val_accuracy(current: AdapterParams) -> float:
        if not val_ids:
            return 0.0
        correct = 0
        for image_id, target in zip(val_ids, val_targets):
            trace = adapter_forward(embeddings.view(image_id, 0), current,
                                    weights, mode="eval",
                                    cosine_mode=config.cosine_mode)
            correct += int(np.argmax(trace.probs) == target)
        return correct / len(val_ids)

    for epoch in range(config.max_epochs):
        state.epoch = epoch
        lr = lr_at_epoch(epoch, config)
        order = state.shuffle_rng.permutation(len(train_ids))
        if embeddings.n_views > 1:
            views = state.shuffle_rng.integers(0, embeddings.n_views, len(train_ids))
        else:
            views = np.zeros(len(train_ids), dtype=np.int64)

        loss_sum = 0.0
        seen = 0
        for start in range(0, len(train_ids), config.batch_size):
            batch = order[start:start + config.batch_size]
            traces = []
            targets = np.empty(len(batch), dtype=np.int64)
            probs = np.empty((len(batch), n_classes), dtype=np.float64)
            for j, sample in enumerate(batch):
                image_id = train_ids[sample]
                tokens = embeddings.view(image_id, int(views[sample]))
                trace = adapter_forward(tokens, state.params, weights,
                                        mode="train", rng=state.dropout_rng,
                                        cosine_mode=config.cosine_mode)
                traces.append(trace)
                targets[j] = labels.entries[image_id]
                probs[j] = trace.probs
            loss, grad_logits = weighted_cross_entropy(probs, targets, class_weights)
            accum: dict[str, np.ndarray] = {
                n: np.zeros_like(t) for n, t in state.params.tensors().items()}
            for j, trace in enumerate(traces):
                sample_grads = adapter_backward(
                    trace, grad_logits[j].astype(trace.logits.dtype), state.params)
                for name in accum:
                    accum[name] += sample_grads[name]
            adamw_step(state, accum, lr, config)
            loss_sum += loss * len(batch)
            seen += len(batch)

        train_loss = loss_sum / seen
        acc = val_accuracy(state.params)
        is_best = (not val_ids) or acc > state.best_val_accuracy
        if is_best:
            state.best_val_accuracy = acc
            state.best_epoch = epoch
            state.epochs_since_improvement = 0
            best_params = state.params.copy()
        else:
            state.epochs_since_improvement += 1
        state.history.append(EpochStats(epoch=epoch, lr=lr, train_loss=train_loss,
                                        val_accuracy=acc, is_best=is_best))
        if state.epochs_since_improvement >= config.patience:
            break

    return best_params, state.history


_PRESETS = {
    # attribute: (weighting mode, blend ratio, attention heads)
    "platform": ("uniform", 0.8, 4),
    "weather": ("uniform", 0.2, 8),
    "view_direction": ("inverse", 0.8, 4),
    "lighting_condition": ("inverse", 0.8, 8),
    "panoramic_status": ("uniform", 0.2, 4),
    "quality": ("inverse", 0.2, 16),
    "glare": ("uniform", 0.8, 4),
    "reflection": ("inverse", 0.8, 8),
}


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def load_preset(attribute_name: str) -> dict:
    """Tuned (weighting mode, blend ratio, heads) triple for one of the eight
    street-view attributes. Bottleneck width and dropout stay at the global
    defaults."""
    key = attribute_name.strip().lower().replace("-", "_").replace(" ", "_")
    if key not in _PRESETS:
        raise UnknownAttribute(
            f"{attribute_name!r}; known: {', '.join(preset_names())}")
    weighting, alpha, heads = _PRESETS[key]
    return {"weighting_mode": weighting, "alpha": alpha, "heads": heads}


def apply_preset(config: TrainConfig, attribute_name: str) -> TrainConfig:
    return replace(config, **load_preset(attribute_name))
