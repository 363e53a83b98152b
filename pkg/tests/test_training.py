"""Loss, schedule, optimizer, presets, and the fit loop."""

from __future__ import annotations

import math

import numpy as np
import pytest

from patchadapter import dataio
from patchadapter.dataio import LabelTable
from patchadapter.errors import (
    EmptyTrainSet,
    ShapeMismatch,
    UnknownAttribute,
    UnknownImageId,
    ZeroCount,
)
from patchadapter.metrics import predict
from patchadapter.training import (
    TrainConfig,
    TrainState,
    _adamw_tensor_update,
    adamw_step,
    class_counts,
    fit,
    inverse_frequency_weights,
    load_preset,
    lr_at_epoch,
    preset_names,
    uniform_weights,
    weighted_cross_entropy,
)
from patchadapter.adapter import init_adapter_params
from conftest import build_separable_task


# --- class weights ---

def test_inverse_weights_balanced():
    np.testing.assert_allclose(inverse_frequency_weights([10, 10]).weights,
                               [0.5, 0.5], atol=1e-15)


def test_inverse_weights_hand_cases():
    np.testing.assert_allclose(inverse_frequency_weights([1, 3]).weights,
                               [0.75, 0.25], atol=1e-12)
    np.testing.assert_allclose(inverse_frequency_weights([1, 1, 2]).weights,
                               [0.4, 0.4, 0.2], atol=1e-12)
    assert inverse_frequency_weights([5, 7, 1]).weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_inverse_weights_zero_count():
    with pytest.raises(ZeroCount):
        inverse_frequency_weights([3, 0, 2])


# --- weighted cross-entropy ---

def test_loss_zero_on_certain_correct_prediction():
    probs = np.array([[1.0, 0.0, 0.0]])
    loss, grad = weighted_cross_entropy(probs, [0], uniform_weights(3))
    assert loss == 0.0
    np.testing.assert_allclose(grad, [[0.0, 0.0, 0.0]], atol=1e-15)


def test_loss_uniform_hand_case():
    probs = np.array([[0.5, 0.5], [0.25, 0.75]])
    loss, _ = weighted_cross_entropy(probs, [0, 0], uniform_weights(2))
    assert loss == pytest.approx(1.0397207708399179, abs=1e-12)


def test_loss_weighted_hand_case():
    # both samples at probability 0.5: the weights cancel by normalization
    probs = np.array([[0.5, 0.5], [0.5, 0.5]])
    cw = inverse_frequency_weights([1, 3])  # weights [0.75, 0.25]
    loss, _ = weighted_cross_entropy(probs, [0, 1], cw)
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)


def test_loss_uniform_equals_plain_mean_bitwise():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n_b = int(rng.integers(1, 33))
        k = int(rng.integers(2, 7))
        logits = rng.normal(size=(n_b, k)) * 5.0
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        targets = rng.integers(0, k, size=n_b)
        loss, grad = weighted_cross_entropy(probs, targets, uniform_weights(k))
        # independently coded plain mean cross-entropy
        rows = np.arange(n_b)
        plain = -np.sum(np.log(np.maximum(probs[rows, targets], 1e-12))) / n_b
        assert loss == plain  # bit for bit
        onehot_grad = probs.copy()
        onehot_grad[rows, targets] -= 1.0
        np.testing.assert_allclose(grad, onehot_grad / n_b, atol=1e-15)


def test_loss_invariant_under_weight_rescaling():
    rng = np.random.default_rng(8)
    probs = rng.dirichlet(np.ones(4), size=12)
    targets = rng.integers(0, 4, size=12)
    base = inverse_frequency_weights(rng.integers(1, 9, size=4))
    scaled = type(base)(weights=base.weights * 37.5)
    l1, g1 = weighted_cross_entropy(probs, targets, base)
    l2, g2 = weighted_cross_entropy(probs, targets, scaled)
    assert l1 == pytest.approx(l2, abs=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    n_b, k = 5, 4
    logits = rng.normal(size=(n_b, k))
    targets = rng.integers(0, k, size=n_b)
    cw = inverse_frequency_weights(rng.integers(1, 6, size=k))

    def loss_of(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        loss, _ = weighted_cross_entropy(p, targets, cw)
        return loss

    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    _, grad = weighted_cross_entropy(probs, targets, cw)
    h = 1e-6
    for i in range(n_b):
        for j in range(k):
            bumped = logits.copy()
            bumped[i, j] += h
            dimmed = logits.copy()
            dimmed[i, j] -= h
            fd = (loss_of(bumped) - loss_of(dimmed)) / (2 * h)
            assert abs(fd - grad[i, j]) < 1e-5


def test_loss_rejects_unnormalized_rows():
    with pytest.raises(ValueError):
        weighted_cross_entropy(np.array([[0.9, 0.9]]), [0], uniform_weights(2))


def test_loss_underflow_clamped():
    # a zero probability on the target class hits the 1e-12 log clamp
    loss, grad = weighted_cross_entropy(np.array([[0.0, 1.0]]), [0],
                                        uniform_weights(2))
    assert loss == pytest.approx(-math.log(1e-12))
    assert np.all(np.isfinite(grad))


# --- learning-rate schedule ---

def test_schedule_pinned_points():
    config = TrainConfig()
    assert lr_at_epoch(0, config) == 1e-5
    assert lr_at_epoch(5, config) == 5e-4
    # integral cosine midpoint: 5 + (105 - 5) / 2 = 55
    mid_config = TrainConfig(max_epochs=105)
    assert lr_at_epoch(55, mid_config) == 2.5e-4
    # the default schedule midpoint falls between epochs
    assert lr_at_epoch(52.5, config) == 2.5e-4


def test_schedule_warmup_is_linear():
    config = TrainConfig()
    quarter = lr_at_epoch(1, config)
    assert quarter == pytest.approx(1e-5 + (5e-4 - 1e-5) / 5, rel=1e-15)


def test_schedule_boundary_continuity():
    config = TrainConfig()
    warmup_extrapolated = config.warmup_start_lr + (
        config.peak_lr - config.warmup_start_lr) * config.warmup_epochs / config.warmup_epochs
    assert abs(warmup_extrapolated - lr_at_epoch(config.warmup_epochs, config)) < 1e-12


def test_schedule_decays_to_zero():
    config = TrainConfig(max_epochs=50)
    assert lr_at_epoch(49, config) < lr_at_epoch(40, config)
    assert lr_at_epoch(49, config) > 0.0
    with pytest.raises(ValueError):
        lr_at_epoch(50, config)


# --- AdamW ---

def test_adamw_scalar_hand_case():
    theta = np.array([1.0])
    m = np.zeros(1)
    v = np.zeros(1)
    _adamw_tensor_update(theta, np.array([1.0]), m, v, t=1, lr=0.1,
                         beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    assert theta[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)


def test_adamw_decay_only():
    theta = np.array([1.0])
    _adamw_tensor_update(theta, np.array([0.0]), np.zeros(1), np.zeros(1),
                         t=1, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8,
                         weight_decay=0.01)
    assert theta[0] == pytest.approx(0.999, abs=1e-12)


def test_adamw_zero_grad_no_decay_is_identity():
    params = init_adapter_params(8, 2, 2, alpha=0.5, rng=np.random.default_rng(0))
    before = {n: t.copy() for n, t in params.tensors().items()}
    state = TrainState.fresh(params)
    config = TrainConfig(weight_decay=0.0)
    zeros = {n: np.zeros_like(t) for n, t in params.tensors().items()}
    adamw_step(state, zeros, lr=1e-3, config=config)
    assert state.t == 1
    for name, tensor in params.tensors().items():
        np.testing.assert_array_equal(tensor, before[name])


def test_adamw_shape_mismatch():
    params = init_adapter_params(8, 2, 2, alpha=0.5, rng=np.random.default_rng(0))
    state = TrainState.fresh(params)
    bad = {n: np.zeros_like(t) for n, t in params.tensors().items()}
    bad["w_q"] = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ShapeMismatch):
        adamw_step(state, bad, lr=1e-3, config=TrainConfig())


# --- fit loop ---

def small_task(**kwargs):
    defaults = dict(seed=5, n_samples=48, k=3, dim=32, n_patches=4, noise=0.1)
    defaults.update(kwargs)
    return build_separable_task(**defaults)


def test_fit_learns_separable_task():
    embeddings, labels, weights = small_task()
    split = dataio.stratified_split(labels, 0.25, seed=1)
    config = TrainConfig(max_epochs=40, patience=40, batch_size=16, seed=42)
    params, history = fit(embeddings, labels, weights, split, config)
    assert len(history) == 40
    preds = predict(params, weights, embeddings, split.val_ids)
    truth = np.array([labels.entries[i] for i in split.val_ids])
    assert (preds == truth).mean() >= 0.9
    assert history[-1].train_loss < history[0].train_loss


def test_fit_early_stops_on_frozen_metric():
    # two validation samples share one embedding but carry different labels,
    # so validation accuracy is 0.5 whatever the parameters are
    embeddings, labels, weights = small_task(n_samples=20, k=2)
    embeddings.data[1] = embeddings.data[0]
    ids = embeddings.image_ids
    labels.entries[ids[0]] = 0
    labels.entries[ids[1]] = 1
    split = dataio.SplitAssignment(train_ids=ids[2:], val_ids=ids[:2], seed=0)
    config = TrainConfig(max_epochs=50, patience=1, batch_size=8, seed=42)
    _, history = fit(embeddings, labels, weights, split, config)
    assert len(history) == 2  # epoch 0 improves, epoch 1 trips the patience
    assert history[0].is_best and not history[1].is_best
    assert history[0].val_accuracy == history[1].val_accuracy == 0.5


def test_fit_deterministic_given_seed():
    embeddings, labels, weights = small_task()
    split = dataio.stratified_split(labels, 0.25, seed=1)
    config = TrainConfig(max_epochs=6, batch_size=16, seed=42)
    params_a, hist_a = fit(embeddings, labels, weights, split, config)
    params_b, hist_b = fit(embeddings, labels, weights, split, config)
    assert [(h.lr, h.train_loss, h.val_accuracy) for h in hist_a] == \
           [(h.lr, h.train_loss, h.val_accuracy) for h in hist_b]
    for name, tensor in params_a.tensors().items():
        np.testing.assert_array_equal(tensor, params_b.tensors()[name])


def test_fit_returns_best_epoch_parameters():
    # a noisy task with a hot learning rate so validation accuracy fluctuates
    embeddings, labels, weights = small_task(noise=0.8, n_samples=60)
    split = dataio.stratified_split(labels, 0.3, seed=3)
    config = TrainConfig(max_epochs=25, patience=25, batch_size=8, seed=7,
                         peak_lr=5e-3, warmup_epochs=1, dropout_p=0.3)
    params, history = fit(embeddings, labels, weights, split, config)
    accs = [h.val_accuracy for h in history]
    best_epochs = [h.epoch for h in history if h.is_best]
    assert max(accs) == accs[best_epochs[-1]]
    assert accs.index(max(accs)) == best_epochs[-1]  # ties keep the earlier epoch
    preds = predict(params, weights, embeddings, split.val_ids)
    truth = np.array([labels.entries[i] for i in split.val_ids])
    assert (preds == truth).mean() == pytest.approx(max(accs))
    assert best_epochs[-1] < history[-1].epoch  # best is not simply the final epoch


def test_fit_empty_val_runs_full_budget_and_returns_final():
    embeddings, labels, weights = small_task()
    split = dataio.stratified_split(labels, 0.0, seed=1)
    config = TrainConfig(max_epochs=8, patience=2, batch_size=16, seed=42)
    _, history = fit(embeddings, labels, weights, split, config)
    assert len(history) == 8
    assert all(h.is_best for h in history)


def test_fit_samples_views_deterministically():
    embeddings, labels, weights = small_task()
    stacked = np.concatenate([embeddings.data, embeddings.data * 1.01], axis=1)
    embeddings.data = stacked  # two views per image
    split = dataio.stratified_split(labels, 0.25, seed=1)
    config = TrainConfig(max_epochs=4, warmup_epochs=2, batch_size=16, seed=42)
    _, hist_a = fit(embeddings, labels, weights, split, config)
    _, hist_b = fit(embeddings, labels, weights, split, config)
    assert [h.train_loss for h in hist_a] == [h.train_loss for h in hist_b]


def test_fit_input_validation():
    embeddings, labels, weights = small_task()
    empty = dataio.SplitAssignment(train_ids=[], val_ids=[], seed=0)
    with pytest.raises(EmptyTrainSet):
        fit(embeddings, labels, weights, empty, TrainConfig())
    ghost = dataio.SplitAssignment(train_ids=["missing"], val_ids=[], seed=0)
    with pytest.raises(UnknownImageId):
        fit(embeddings, labels, weights, ghost, TrainConfig())


def test_fit_with_biases_and_inverse_weighting():
    embeddings, labels, weights = small_task()
    split = dataio.stratified_split(labels, 0.25, seed=1)
    config = TrainConfig(max_epochs=30, patience=30, batch_size=16, seed=42,
                         use_bias=True, weighting_mode="inverse")
    params, history = fit(embeddings, labels, weights, split, config)
    assert params.use_bias and params.b_v1 is not None
    preds = predict(params, weights, embeddings, split.val_ids)
    truth = np.array([labels.entries[i] for i in split.val_ids])
    assert (preds == truth).mean() >= 0.9


def test_fit_checkpoint_evaluate_flow(tmp_path):
    # library-level end to end: train, persist, reload, evaluate
    from patchadapter.dataio import CheckpointMeta, load_checkpoint, save_checkpoint
    from patchadapter.metrics import evaluate

    embeddings, labels, weights = small_task()
    split = dataio.stratified_split(labels, 0.25, seed=1)
    config = TrainConfig(max_epochs=30, patience=30, batch_size=16, seed=42)
    params, history = fit(embeddings, labels, weights, split, config)
    best = [h for h in history if h.is_best][-1]
    path = tmp_path / "best.mhc1"
    save_checkpoint(params, CheckpointMeta(best.epoch, best.val_accuracy), path)
    loaded, meta = load_checkpoint(path, dim=32)
    report = evaluate(loaded, weights, embeddings,
                      LabelTable({i: labels.entries[i] for i in split.val_ids}))
    assert report.accuracy == pytest.approx(meta.val_accuracy)


def test_class_counts_use_training_partition_only():
    labels = LabelTable({f"t{i}": i % 3 for i in range(12)}
                        | {f"v{i}": 0 for i in range(4)})
    train_ids = [f"t{i}" for i in range(12)]
    counts = class_counts(labels, train_ids, 3)
    np.testing.assert_array_equal(counts, [4, 4, 4])
    # permuting the validation labels cannot change the weight vector
    shuffled = LabelTable(dict(labels.entries))
    for i in range(4):
        shuffled.entries[f"v{i}"] = (i + 1) % 3
    np.testing.assert_array_equal(class_counts(shuffled, train_ids, 3), counts)
    np.testing.assert_array_equal(
        inverse_frequency_weights(counts).weights,
        inverse_frequency_weights(class_counts(shuffled, train_ids, 3)).weights)


# --- presets ---

def test_all_eight_presets():
    expected = {
        "platform": ("uniform", 0.8, 4),
        "weather": ("uniform", 0.2, 8),
        "view_direction": ("inverse", 0.8, 4),
        "lighting_condition": ("inverse", 0.8, 8),
        "panoramic_status": ("uniform", 0.2, 4),
        "quality": ("inverse", 0.2, 16),
        "glare": ("uniform", 0.8, 4),
        "reflection": ("inverse", 0.8, 8),
    }
    assert set(preset_names()) == set(expected)
    for name, (weighting, alpha, heads) in expected.items():
        preset = load_preset(name)
        assert preset == {"weighting_mode": weighting, "alpha": alpha,
                          "heads": heads}, name


def test_preset_name_normalization():
    assert load_preset("View Direction") == load_preset("view_direction")
    assert load_preset(" Lighting-Condition ") == load_preset("lighting_condition")


def test_preset_unknown_attribute():
    with pytest.raises(UnknownAttribute):
        load_preset("vibes")
