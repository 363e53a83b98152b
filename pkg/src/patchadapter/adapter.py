"""The adapter head: bottleneck MLP, per-token layer norm, multi-head
self-attention over patch tokens, dropout, mean pooling, and a residual blend
against the frozen global token, followed by temperature-scaled classification.

All operations are pure functions of their inputs plus an explicit RNG handle.
``adapter_forward`` caches every intermediate in a :class:`ForwardTrace` so
``adapter_backward`` can replay the pass in reverse and produce exact gradients
for every trainable tensor. Classifier weights are frozen and never receive a
gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import ShapeMismatch, TraceMismatch, ZeroVectorInCosineMode

if TYPE_CHECKING:
    from .dataio import ClassifierWeights

_NORM_FLOOR = 1e-12


@dataclass
class AdapterParams:
    """Trainable tensors plus the structural hyperparameters of the head.

    Weight shapes: ``w_v1 [dim, bottleneck]``, ``w_v2 [bottleneck, dim]``,
    ``gamma``/``beta`` ``[dim]``, attention projections ``[dim, dim]``.
    Bias tensors are present iff ``use_bias`` is set.
    """

    w_v1: np.ndarray
    w_v2: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    alpha: float
    heads: int
    dropout_p: float = 0.1
    ln_eps: float = 1e-5
    use_bias: bool = False
    b_v1: np.ndarray | None = None
    b_v2: np.ndarray | None = None
    b_q: np.ndarray | None = None
    b_k: np.ndarray | None = None
    b_v: np.ndarray | None = None
    b_o: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.w_v1.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_v1.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors in the canonical (checkpoint and update) order."""
        out: dict[str, np.ndarray] = {"w_v1": self.w_v1, "w_v2": self.w_v2,
                                      "gamma": self.gamma, "beta": self.beta,
                                      "w_q": self.w_q, "w_k": self.w_k,
                                      "w_v": self.w_v, "w_o": self.w_o}
        if self.use_bias:
            out.update({"b_v1": self.b_v1, "b_v2": self.b_v2, "b_q": self.b_q,
                        "b_k": self.b_k, "b_v": self.b_v, "b_o": self.b_o})
        return out

    def copy(self) -> "AdapterParams":
        dup = {n: t.copy() for n, t in self.tensors().items()}
        return AdapterParams(alpha=self.alpha, heads=self.heads,
                             dropout_p=self.dropout_p, ln_eps=self.ln_eps,
                             use_bias=self.use_bias,
                             **{n: dup.get(n) for n in
                                ("w_v1", "w_v2", "gamma", "beta",
                                 "w_q", "w_k", "w_v", "w_o",
                                 "b_v1", "b_v2", "b_q", "b_k", "b_v", "b_o")})

    def validate(self) -> None:
        d, d_b = self.dim, self.bottleneck
        if d_b < 1:
            raise ValueError("bottleneck width must be >= 1")
        if self.heads < 1 or d % self.heads != 0:
            raise ShapeMismatch(f"dim {d} not divisible by heads {self.heads}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p {self.dropout_p} outside [0, 1)")
        if self.ln_eps <= 0.0:
            raise ValueError("ln_eps must be positive")
        shapes = {"w_v1": (d, d_b), "w_v2": (d_b, d), "gamma": (d,),
                  "beta": (d,), "w_q": (d, d), "w_k": (d, d), "w_v": (d, d),
                  "w_o": (d, d)}
        if self.use_bias:
            shapes.update({"b_v1": (d_b,), "b_v2": (d,), "b_q": (d,),
                           "b_k": (d,), "b_v": (d,), "b_o": (d,)})
        for name, want in shapes.items():
            t = getattr(self, name)
            if t is None or t.shape != want:
                raise ShapeMismatch(f"{name}: expected shape {want}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name} contains non-finite values")


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass, kept for the backward pass and
    for attention-map extraction."""

    x: np.ndarray            # patch tokens [n, dim]
    f0: np.ndarray           # global token [dim]
    mlp_pre: np.ndarray      # pre-ReLU bottleneck activations [n, bottleneck]
    mlp_hidden: np.ndarray   # ReLU output [n, bottleneck]
    x_av: np.ndarray         # bottleneck MLP output [n, dim]
    mu: np.ndarray           # per-token mean [n]
    var: np.ndarray          # per-token biased variance [n]
    x_ln: np.ndarray         # layer-normalized tokens [n, dim]
    q: np.ndarray            # per-head queries [heads, n, d_k]
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray         # attention probabilities [heads, n, n]
    concat: np.ndarray       # heads reassembled, pre output-projection [n, dim]
    x_mhsa: np.ndarray       # attention output [n, dim]
    mask: np.ndarray         # dropout keep mask [n, dim]
    x_drop: np.ndarray       # [n, dim]
    x_mean: np.ndarray       # pooled adapter output [dim]
    f_star: np.ndarray       # blended feature [dim]
    logits: np.ndarray       # [k]
    probs: np.ndarray        # [k]
    mode: str
    cosine_mode: bool
    tau: float
    w_class: np.ndarray      # classifier rows as used (normalized in cosine mode)
    f_unit: np.ndarray | None = None   # f_star / |f_star| (cosine mode only)
    f_norm: float = 0.0
    heads: int = 0
    param_shapes: dict = field(default_factory=dict)


def init_adapter_params(dim: int, bottleneck: int, heads: int, alpha: float,
                        dropout_p: float = 0.1, ln_eps: float = 1e-5,
                        use_bias: bool = False,
                        rng: np.random.Generator | None = None,
                        dtype=np.float32) -> AdapterParams:
    """Fresh parameters: weights uniform in +-1/sqrt(fan_in), gamma ones,
    beta and biases zero. Keeps the initial adapter output small so the blend
    starts near the unadapted solution."""
    if bottleneck < 1:
        raise ValueError("bottleneck width must be >= 1")
    if heads < 1 or dim % heads != 0:
        raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
    rng = rng if rng is not None else np.random.default_rng()

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    params = AdapterParams(
        w_v1=uniform(dim, (dim, bottleneck)),
        w_v2=uniform(bottleneck, (bottleneck, dim)),
        gamma=np.ones(dim, dtype=dtype),
        beta=np.zeros(dim, dtype=dtype),
        w_q=uniform(dim, (dim, dim)),
        w_k=uniform(dim, (dim, dim)),
        w_v=uniform(dim, (dim, dim)),
        w_o=uniform(dim, (dim, dim)),
        alpha=float(alpha),
        heads=int(heads),
        dropout_p=float(dropout_p),
        ln_eps=float(ln_eps),
        use_bias=bool(use_bias),
    )
    if use_bias:
        params.b_v1 = np.zeros(bottleneck, dtype=dtype)
        params.b_v2 = np.zeros(dim, dtype=dtype)
        params.b_q = np.zeros(dim, dtype=dtype)
        params.b_k = np.zeros(dim, dtype=dtype)
        params.b_v = np.zeros(dim, dtype=dtype)
        params.b_o = np.zeros(dim, dtype=dtype)
    params.validate()
    return params


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction)."""
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _mlp(tokens: np.ndarray, params: AdapterParams):
    pre = tokens @ params.w_v1
    if params.use_bias:
        pre = pre + params.b_v1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ params.w_v2
    if params.use_bias:
        out = out + params.b_v2
    return out, pre, hidden


def bottleneck_mlp(tokens: np.ndarray, params: AdapterParams) -> np.ndarray:
    """Two-layer bottleneck projection ReLU(X W1) W2, shape preserving."""
    if tokens.ndim != 2 or tokens.shape[1] != params.dim:
        raise ShapeMismatch(f"tokens shape {tokens.shape} does not match dim {params.dim}")
    out, _, _ = _mlp(tokens, params)
    return out


def layer_norm(tokens: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float):
    """Normalize each token by its own mean and biased variance over the
    feature axis, then apply the per-feature affine. Returns (out, mu, var)."""
    mu = tokens.mean(axis=1)
    centered = tokens - mu[:, None]
    var = np.mean(centered * centered, axis=1)
    inv = 1.0 / np.sqrt(var + eps)
    out = gamma * (centered * inv[:, None]) + beta
    return out, mu, var


def _split_heads(mat: np.ndarray, heads: int) -> np.ndarray:
    n, d = mat.shape
    return mat.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(per_head: np.ndarray) -> np.ndarray:
    h, n, d_k = per_head.shape
    return per_head.transpose(1, 0, 2).reshape(n, h * d_k)


def _mhsa_trace(tokens_ln: np.ndarray, params: AdapterParams):
    n, d = tokens_ln.shape
    if d != params.dim:
        raise ShapeMismatch(f"tokens shape {tokens_ln.shape} does not match dim {params.dim}")
    if d % params.heads != 0:
        raise ShapeMismatch(f"dim {d} not divisible by heads {params.heads}")
    q_full = tokens_ln @ params.w_q
    k_full = tokens_ln @ params.w_k
    v_full = tokens_ln @ params.w_v
    if params.use_bias:
        q_full = q_full + params.b_q
        k_full = k_full + params.b_k
        v_full = v_full + params.b_v
    q = _split_heads(q_full, params.heads)
    k = _split_heads(k_full, params.heads)
    v = _split_heads(v_full, params.heads)
    d_k = d // params.heads
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(d_k)
    attn = _softmax(scores, axis=-1)
    concat = _merge_heads(attn @ v)
    out = concat @ params.w_o
    if params.use_bias:
        out = out + params.b_o
    return out, attn, concat, q, k, v


def mhsa(tokens_ln: np.ndarray, params: AdapterParams):
    """Multi-head scaled dot-product self-attention with output projection.

    Q, K, V all come from the same layer-normalized token sequence; each head
    works on a dim/heads slice with scale 1/sqrt(d_k). Returns the projected
    output and the per-head attention probabilities [heads, n, n].
    """
    out, attn, _, _, _, _ = _mhsa_trace(tokens_ln, params)
    return out, attn


def dropout(tokens: np.ndarray, p: float, mode: str,
            rng: np.random.Generator | None = None):
    """Inverted dropout. Train mode keeps entries with probability 1-p and
    rescales by 1/(1-p); eval mode is the exact identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if mode == "eval" or p == 0.0:
        return tokens, np.ones_like(tokens)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout with p > 0 needs an RNG")
    mask = (rng.random(tokens.shape) < (1.0 - p)).astype(tokens.dtype)
    return tokens * mask / (1.0 - p), mask


def mean_pool(tokens: np.ndarray) -> np.ndarray:
    """Arithmetic mean over the token axis."""
    if tokens.shape[0] < 1:
        raise ShapeMismatch("mean_pool needs at least one token")
    return tokens.mean(axis=0)


def residual_blend(adapted: np.ndarray, global_token: np.ndarray,
                   alpha: float) -> np.ndarray:
    """Convex combination alpha*adapted + (1-alpha)*global_token.

    The endpoints short-circuit so alpha=0 returns the global token bit for
    bit (the frozen zero-training path) and alpha=1 the adapted vector.
    """
    if adapted.shape != global_token.shape:
        raise ShapeMismatch(f"{adapted.shape} vs {global_token.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    if alpha == 0.0:
        return global_token.copy()
    if alpha == 1.0:
        return adapted.copy()
    return alpha * adapted + (1.0 - alpha) * global_token


def _classify_full(f_star: np.ndarray, weights: "ClassifierWeights",
                   cosine_mode: bool):
    """Shared classification stage, always in float64: the 1/tau scaling
    amplifies rounding in the cosine denominators, so lower precision here
    shows up as probability jitter."""
    w = np.asarray(weights.weights, dtype=np.float64)
    if f_star.shape != (w.shape[1],):
        raise ShapeMismatch(f"feature {f_star.shape} vs weight rows {w.shape}")
    f = np.asarray(f_star, dtype=np.float64)
    tau = float(weights.temperature)
    if cosine_mode:
        f_norm = float(np.linalg.norm(f))
        if f_norm < _NORM_FLOOR:
            raise ZeroVectorInCosineMode("feature norm below 1e-12")
        row_norms = np.linalg.norm(w, axis=1)
        if np.any(row_norms < _NORM_FLOOR):
            raise ZeroVectorInCosineMode("classifier row norm below 1e-12")
        logits = (w @ f) / (row_norms * f_norm) / tau
        w_class = w / row_norms[:, None]
        f_unit = f / f_norm
    else:
        logits = (w @ f) / tau
        w_class = w
        f_unit = None
        f_norm = 0.0
    return logits, _softmax(logits), w_class, f_unit, f_norm


def classify(f_star: np.ndarray, weights: "ClassifierWeights",
             cosine_mode: bool = True):
    """Temperature-scaled class scores for one feature vector.

    With ``cosine_mode`` (the default) the feature and every classifier row
    are L2-normalized before the dot product, so positive rescaling of the
    feature cannot change the outcome. With the flag off the raw dot product
    is used. Returns (logits, probabilities).
    """
    logits, probs, _, _, _ = _classify_full(f_star, weights, cosine_mode)
    return logits, probs


def adapter_forward(view_tokens: np.ndarray, params: AdapterParams,
                    weights: "ClassifierWeights", mode: str = "eval",
                    rng: np.random.Generator | None = None,
                    cosine_mode: bool = True) -> ForwardTrace:
    """Full head pass over one view: token 0 is the global token, the rest are
    patch tokens fed through MLP -> layer norm -> attention -> dropout -> mean
    pool, blended with the global token and classified."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if view_tokens.ndim != 2 or view_tokens.shape[0] < 2:
        raise ShapeMismatch("need a global token plus at least one patch token")
    if view_tokens.shape[1] != params.dim:
        raise ShapeMismatch(f"token dim {view_tokens.shape[1]} vs params dim {params.dim}")

    f0 = view_tokens[0]
    x = view_tokens[1:]
    x_av, mlp_pre, mlp_hidden = _mlp(x, params)
    x_ln, mu, var = layer_norm(x_av, params.gamma, params.beta, params.ln_eps)
    x_mhsa, attn, concat, q, k, v = _mhsa_trace(x_ln, params)
    x_drop, mask = dropout(x_mhsa, params.dropout_p, mode, rng)
    x_mean = mean_pool(x_drop)
    f_star = residual_blend(x_mean, f0, params.alpha)
    logits, probs, w_class, f_unit, f_norm = _classify_full(
        f_star, weights, cosine_mode)

    return ForwardTrace(
        x=x, f0=f0, mlp_pre=mlp_pre, mlp_hidden=mlp_hidden, x_av=x_av,
        mu=mu, var=var, x_ln=x_ln, q=q, k=k, v=v, attn=attn, concat=concat,
        x_mhsa=x_mhsa, mask=mask, x_drop=x_drop, x_mean=x_mean, f_star=f_star,
        logits=logits, probs=probs, mode=mode, cosine_mode=cosine_mode,
        tau=float(weights.temperature), w_class=w_class, f_unit=f_unit,
        f_norm=f_norm,
        heads=params.heads,
        param_shapes={n: t.shape for n, t in params.tensors().items()},
    )


def adapter_backward(trace: ForwardTrace, loss_grad_on_logits: np.ndarray,
                     params: AdapterParams) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every trainable tensor.

    Replays the cached forward pass in reverse; the dropout mask is reused,
    never resampled, and the frozen classifier weights receive no gradient.
    Returns a dict keyed like ``params.tensors()``.
    """
    if trace.mode != "train":
        raise TraceMismatch("backward needs a train-mode trace")
    if trace.heads != params.heads or trace.param_shapes != {
            n: t.shape for n, t in params.tensors().items()}:
        raise TraceMismatch("trace does not match these parameters")
    g_logits = np.asarray(loss_grad_on_logits)
    if g_logits.shape != trace.logits.shape:
        raise ShapeMismatch(f"logit grad {g_logits.shape} vs logits {trace.logits.shape}")

    # classification: logits = w_class @ f (unit vectors in cosine mode) / tau
    s = trace.w_class.T @ g_logits
    if trace.cosine_mode:
        g_fstar = (s - (trace.f_unit @ s) * trace.f_unit) / (trace.tau * trace.f_norm)
    else:
        g_fstar = s / trace.tau

    # residual blend: only the adapted branch is trainable
    g_mean = params.alpha * g_fstar

    # mean pool
    n = trace.x.shape[0]
    g_drop = np.broadcast_to(g_mean / n, trace.x_drop.shape)

    # dropout (reuse the stored mask)
    if trace.mode == "train" and params.dropout_p > 0.0:
        g_mhsa = g_drop * trace.mask / (1.0 - params.dropout_p)
    else:
        g_mhsa = np.array(g_drop)

    # output projection
    g_wo = trace.concat.T @ g_mhsa
    g_bo = g_mhsa.sum(axis=0)
    g_concat = g_mhsa @ params.w_o.T

    # per-head attention
    heads = params.heads
    d_k = params.dim // heads
    g_head = _split_heads(g_concat, heads)            # [h, n, d_k]
    g_attn = g_head @ trace.v.transpose(0, 2, 1)      # [h, n, n]
    g_v = trace.attn.transpose(0, 2, 1) @ g_head      # [h, n, d_k]
    # softmax backward, row-wise over keys
    inner = (g_attn * trace.attn).sum(axis=-1, keepdims=True)
    g_scores = trace.attn * (g_attn - inner)
    scale = 1.0 / math.sqrt(d_k)
    g_q = g_scores @ trace.k * scale
    g_k = g_scores.transpose(0, 2, 1) @ trace.q * scale

    g_q_full = _merge_heads(g_q)
    g_k_full = _merge_heads(g_k)
    g_v_full = _merge_heads(g_v)
    g_wq = trace.x_ln.T @ g_q_full
    g_wk = trace.x_ln.T @ g_k_full
    g_wv = trace.x_ln.T @ g_v_full
    g_bq = g_q_full.sum(axis=0)
    g_bk = g_k_full.sum(axis=0)
    g_bv = g_v_full.sum(axis=0)
    g_xln = g_q_full @ params.w_q.T + g_k_full @ params.w_k.T + g_v_full @ params.w_v.T

    # layer norm
    inv = 1.0 / np.sqrt(trace.var + params.ln_eps)
    x_hat = (trace.x_av - trace.mu[:, None]) * inv[:, None]
    g_gamma = (g_xln * x_hat).sum(axis=0)
    g_beta = g_xln.sum(axis=0)
    g_xhat = g_xln * params.gamma
    mean_g = g_xhat.mean(axis=1, keepdims=True)
    mean_gx = (g_xhat * x_hat).mean(axis=1, keepdims=True)
    g_xav = inv[:, None] * (g_xhat - mean_g - x_hat * mean_gx)

    # bottleneck MLP
    g_wv2 = trace.mlp_hidden.T @ g_xav
    g_bv2 = g_xav.sum(axis=0)
    g_hidden = g_xav @ params.w_v2.T
    g_pre = g_hidden * (trace.mlp_pre > 0)
    g_wv1 = trace.x.T @ g_pre
    g_bv1 = g_pre.sum(axis=0)

    grads = {"w_v1": g_wv1, "w_v2": g_wv2, "gamma": g_gamma, "beta": g_beta,
             "w_q": g_wq, "w_k": g_wk, "w_v": g_wv, "w_o": g_wo}
    if params.use_bias:
        grads.update({"b_v1": g_bv1, "b_v2": g_bv2, "b_q": g_bq, "b_k": g_bk,
                      "b_v": g_bv, "b_o": g_bo})
    return grads


def attention_salience(trace_or_attn) -> np.ndarray:
    """Per-patch salience: mean attention received by each key over all heads
    and queries. Sums to 1. Accepts a ForwardTrace or a [heads, n, n] tensor."""
    attn = getattr(trace_or_attn, "attn", trace_or_attn)
    attn = np.asarray(attn)
    if attn.ndim != 3:
        raise ShapeMismatch(f"expected [heads, n, n], got {attn.shape}")
    # accumulate in float64: averaging thousands of float32 rows drifts past
    # the 1e-6 normalization bound otherwise
    return attn.mean(axis=(0, 1), dtype=np.float64)


def count_trainable_params(dim: int, bottleneck: int, heads: int,
                           use_bias: bool) -> int:
    """Closed-form count of every trainable tensor entry."""
    if bottleneck < 1:
        raise ValueError("bottleneck width must be >= 1")
    if heads < 1 or dim % heads != 0:
        raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
    count = 2 * dim * bottleneck + 2 * dim + 4 * dim * dim
    if use_bias:
        count += bottleneck + dim + 4 * dim
    return count
