"""Finite-difference verification of the analytic gradients.

The oracle side only ever calls the forward pass: every parameter entry is
perturbed by +-step and the loss difference quotient is compared against the
corresponding analytic gradient entry. Relative error uses a unit floor, so
near-zero gradient pairs are compared absolutely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import adapter_backward, adapter_forward, init_adapter_params
from .dataio import ClassifierWeights

GRID_PATCHES = (1, 3, 9)
GRID_DIM = (8, 16)
GRID_HEADS = (1, 2, 4)
GRID_BOTTLENECK = (2, 4)


@dataclass
class GradCheckResult:
    seed: int
    n_patches: int
    dim: int
    heads: int
    bottleneck: int
    use_bias: bool
    cosine_mode: bool
    worst_tensor: str
    worst_error: float
    passed: bool


def _sample_loss(tokens, params, weights, cosine_mode, target):
    trace = adapter_forward(tokens, params, weights, mode="train",
                            cosine_mode=cosine_mode)
    return -float(np.log(max(float(trace.probs[target]), 1e-12))), trace


def check_config(n_patches: int, dim: int, heads: int, bottleneck: int,
                 seed: int, tolerance: float = 1e-4,
                 step: float = 1e-4) -> GradCheckResult:
    """Compare analytic and central-difference gradients for every entry of
    every trainable tensor of one randomly drawn configuration. Runs in
    double precision with dropout off so the loss is smooth in the step
    neighborhood."""
    rng = np.random.default_rng(seed)
    use_bias = bool(seed % 2)
    cosine_mode = bool((seed >> 1) % 2)
    # ln_eps is kept well above the float ulp so the eps floor of the layer
    # norm cannot blow up the third derivative that bounds central-difference
    # truncation error; the gradient formulas are identical for any eps.
    params = init_adapter_params(
        dim=dim, bottleneck=bottleneck, heads=heads,
        alpha=float(rng.uniform(0.3, 1.0)), dropout_p=0.0, ln_eps=0.05,
        use_bias=use_bias, rng=rng, dtype=np.float64)
    if use_bias:
        # a generic point: zero-init biases leave some paths on measure-zero
        # configurations where FD is ill-conditioned
        for name in ("b_v1", "b_v2", "b_q", "b_k", "b_v", "b_o"):
            tensor = getattr(params, name)
            tensor += rng.normal(0.0, 0.1, size=tensor.shape)
    n_classes = 3
    weights = ClassifierWeights(
        class_names=[f"c{i}" for i in range(n_classes)],
        weights=rng.normal(size=(n_classes, dim)),
        temperature=1.0)
    tokens = rng.normal(size=(n_patches + 1, dim))
    target = int(rng.integers(n_classes))

    _, trace = _sample_loss(tokens, params, weights, cosine_mode, target)
    grad_logits = trace.probs.copy()
    grad_logits[target] -= 1.0
    analytic = adapter_backward(trace, grad_logits, params)

    worst_tensor = ""
    worst_error = 0.0
    for name, tensor in params.tensors().items():
        flat = tensor.reshape(-1)
        flat_grad = analytic[name].reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + step
            loss_plus, _ = _sample_loss(tokens, params, weights, cosine_mode, target)
            flat[idx] = saved - step
            loss_minus, _ = _sample_loss(tokens, params, weights, cosine_mode, target)
            flat[idx] = saved
            fd = (loss_plus - loss_minus) / (2.0 * step)
            a = float(flat_grad[idx])
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            if err > worst_error:
                worst_error = err
                worst_tensor = name
    return GradCheckResult(
        seed=seed, n_patches=n_patches, dim=dim, heads=heads,
        bottleneck=bottleneck, use_bias=use_bias, cosine_mode=cosine_mode,
        worst_tensor=worst_tensor, worst_error=worst_error,
        passed=worst_error < tolerance)


def run_gradcheck(trials: int = 20, dims: tuple[int, int, int, int] | None = None,
                  tolerance: float = 1e-4, base_seed: int = 0) -> list[GradCheckResult]:
    """Run ``trials`` seeded configurations, either drawn from the standard
    grid or pinned to explicit (n_patches, dim, heads, bottleneck) dims."""
    results = []
    for trial in range(trials):
        seed = base_seed + trial
        if dims is None:
            pick = np.random.default_rng(seed ^ 0x5EED)
            n = int(pick.choice(GRID_PATCHES))
            d = int(pick.choice(GRID_DIM))
            h = int(pick.choice(GRID_HEADS))
            d_b = int(pick.choice(GRID_BOTTLENECK))
        else:
            n, d, h, d_b = dims
        results.append(check_config(n, d, h, d_b, seed, tolerance=tolerance))
    return results
