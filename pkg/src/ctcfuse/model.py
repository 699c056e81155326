"""Shared encoder, joint model parameters, total loss, and gradient checks.

The encoder applies an input projection and a stack of residual blocks: two
half-residual feed-forward sublayers (affine, swish, affine) sandwiching an
optional causal depthwise temporal mix of window ``w``, followed by per-frame
layer normalization. No frame subsampling, so output length equals input
length. Backprop is written by hand against cached activations, which is why
``grad_check`` is a first-class operation here rather than a test detail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import aed as aed_mod
from . import ctc as ctc_mod
from . import fusion as fusion_mod
from .aed import AedParams
from .fusion import FusionConfig

LN_EPS = 1e-6


def _swish(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def _swish_grad(z: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@dataclass
class BlockParams:
    ffn1_w1: np.ndarray
    ffn1_b1: np.ndarray
    ffn1_w2: np.ndarray
    ffn1_b2: np.ndarray
    mix_kernel: np.ndarray  # (w, D); w == 0 disables temporal mixing
    ffn2_w1: np.ndarray
    ffn2_b1: np.ndarray
    ffn2_w2: np.ndarray
    ffn2_b2: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray


@dataclass
class EncoderParams:
    w_in: np.ndarray  # (F, D)
    b_in: np.ndarray  # (D,)
    blocks: list[BlockParams]

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int, dim: int,
             n_blocks: int, ff_hidden: int, mix_window: int) -> "EncoderParams":
        if n_blocks < 1:
            raise ValueError("encoder needs at least one block")

        def w(rows, cols):
            return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))

        blocks = []
        for _ in range(n_blocks):
            blocks.append(BlockParams(
                ffn1_w1=w(dim, ff_hidden), ffn1_b1=np.zeros(ff_hidden),
                ffn1_w2=w(ff_hidden, dim), ffn1_b2=np.zeros(dim),
                mix_kernel=rng.normal(0.0, 0.02, size=(mix_window, dim)),
                ffn2_w1=w(dim, ff_hidden), ffn2_b1=np.zeros(ff_hidden),
                ffn2_w2=w(ff_hidden, dim), ffn2_b2=np.zeros(dim),
                ln_gain=np.ones(dim), ln_bias=np.zeros(dim),
            ))
        return cls(w_in=w(feature_dim, dim), b_in=np.zeros(dim), blocks=blocks)


def _ffn_forward(x, w1, b1, w2, b2):
    z = x @ w1 + b1
    h = _swish(z)
    return h @ w2 + b2, (x, z, h)


def _ffn_backward(d_out, cache, w1, w2):
    x, z, h = cache
    d_h = d_out @ w2.T
    d_z = d_h * _swish_grad(z)
    d_x = d_z @ w1.T
    grads = (x.T @ d_z, d_z.sum(axis=0), h.T @ d_out, d_out.sum(axis=0))
    return d_x, grads


def _mix_forward(x, kernel):
    out = np.zeros_like(x)
    T = x.shape[0]
    for k in range(kernel.shape[0]):
        if k < T:
            out[k:] += kernel[k] * x[: T - k]
    return out


def _mix_backward(d_out, x, kernel):
    d_x = np.zeros_like(x)
    d_kernel = np.zeros_like(kernel)
    T = x.shape[0]
    for k in range(kernel.shape[0]):
        if k < T:
            d_x[: T - k] += kernel[k] * d_out[k:]
            d_kernel[k] = (x[: T - k] * d_out[k:]).sum(axis=0)
    return d_x, d_kernel


def _ln_forward(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def _ln_backward(d_out, cache, gain):
    xhat, inv = cache
    d_gain = (d_out * xhat).sum(axis=0)
    d_bias = d_out.sum(axis=0)
    d_xhat = d_out * gain
    mean_d = d_xhat.mean(axis=1, keepdims=True)
    mean_dx = (d_xhat * xhat).mean(axis=1, keepdims=True)
    d_x = inv * (d_xhat - mean_d - xhat * mean_dx)
    return d_x, d_gain, d_bias


def encoder_forward(params: EncoderParams, features: np.ndarray) -> tuple[np.ndarray, list]:
    """Encode (T, F) features into (T, D) states; deterministic, length-preserving."""
    if features.shape[1] != params.w_in.shape[0]:
        raise ValueError(
            f"feature dim {features.shape[1]} != input projection rows {params.w_in.shape[0]}"
        )
    x = features @ params.w_in + params.b_in
    caches = [features]
    for blk in params.blocks:
        f1, c1 = _ffn_forward(x, blk.ffn1_w1, blk.ffn1_b1, blk.ffn1_w2, blk.ffn1_b2)
        h1 = x + 0.5 * f1
        if blk.mix_kernel.shape[0] > 0:
            h2 = h1 + _mix_forward(h1, blk.mix_kernel)
        else:
            h2 = h1
        f2, c2 = _ffn_forward(h2, blk.ffn2_w1, blk.ffn2_b1, blk.ffn2_w2, blk.ffn2_b2)
        h3 = h2 + 0.5 * f2
        out, c3 = _ln_forward(h3, blk.ln_gain, blk.ln_bias)
        caches.append((c1, h1, c2, c3))
        x = out
    return x, caches


def encoder_backward(
    params: EncoderParams, cache: list, d_out: np.ndarray
) -> tuple[EncoderParams, np.ndarray]:
    """(parameter gradients, gradient w.r.t. the input features)."""
    features = cache[0]
    grads = zeros_like_params(params)
    d = d_out
    for i in range(len(params.blocks) - 1, -1, -1):
        blk = params.blocks[i]
        gblk = grads.blocks[i]
        c1, h1, c2, c3 = cache[i + 1]
        d_h3, d_gain, d_bias = _ln_backward(d, c3, blk.ln_gain)
        gblk.ln_gain += d_gain
        gblk.ln_bias += d_bias
        d_f2_in, (gw1, gb1, gw2, gb2) = _ffn_backward(0.5 * d_h3, c2, blk.ffn2_w1, blk.ffn2_w2)
        gblk.ffn2_w1 += gw1
        gblk.ffn2_b1 += gb1
        gblk.ffn2_w2 += gw2
        gblk.ffn2_b2 += gb2
        d_h2 = d_h3 + d_f2_in
        if blk.mix_kernel.shape[0] > 0:
            d_mix_in, d_kernel = _mix_backward(d_h2, h1, blk.mix_kernel)
            gblk.mix_kernel += d_kernel
            d_h1 = d_h2 + d_mix_in
        else:
            d_h1 = d_h2
        d_f1_in, (gw1, gb1, gw2, gb2) = _ffn_backward(0.5 * d_h1, c1, blk.ffn1_w1, blk.ffn1_w2)
        gblk.ffn1_w1 += gw1
        gblk.ffn1_b1 += gb1
        gblk.ffn1_w2 += gw2
        gblk.ffn1_b2 += gb2
        d = d_h1 + d_f1_in
    grads.w_in += features.T @ d
    grads.b_in += d.sum(axis=0)
    d_features = d @ params.w_in.T
    return grads, d_features


# ---------------------------------------------------------------------------
# Joint model
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    encoder: EncoderParams
    aed: AedParams
    ctc_w: np.ndarray  # (D, V)
    ctc_b: np.ndarray  # (V,)

    @classmethod
    def init(cls, rng: np.random.Generator, *, vocab_size: int, feature_dim: int,
             dim: int, embed_dim: int, attn_dim: int, n_blocks: int,
             ff_hidden: int, mix_window: int) -> "ModelParams":
        enc = EncoderParams.init(rng, feature_dim, dim, n_blocks, ff_hidden, mix_window)
        dec = AedParams.init(rng, vocab_size, embed_dim, dim, attn_dim)
        return cls(
            encoder=enc,
            aed=dec,
            ctc_w=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, vocab_size)),
            ctc_b=np.zeros(vocab_size),
        )

    @property
    def vocab_size(self) -> int:
        return self.ctc_w.shape[1]


def named_arrays(params, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    """Flat (name, array) view of a params tree, in deterministic field order."""
    out = []
    if isinstance(params, np.ndarray):
        out.append((prefix, params))
    elif isinstance(params, list):
        for i, item in enumerate(params):
            out.extend(named_arrays(item, f"{prefix}.{i}"))
    else:
        for f in fields(params):
            name = f"{prefix}.{f.name}" if prefix else f.name
            out.extend(named_arrays(getattr(params, f.name), name))
    return out


def zeros_like_params(params):
    """Structural copy with all arrays zeroed."""
    if isinstance(params, np.ndarray):
        return np.zeros_like(params)
    if isinstance(params, list):
        return [zeros_like_params(p) for p in params]
    return type(params)(**{
        f.name: zeros_like_params(getattr(params, f.name)) for f in fields(params)
    })


def copy_params(params):
    if isinstance(params, np.ndarray):
        return params.copy()
    if isinstance(params, list):
        return [copy_params(p) for p in params]
    return type(params)(**{f.name: copy_params(getattr(params, f.name)) for f in fields(params)})


def to_vector(params) -> np.ndarray:
    """Concatenate every array row-major into one flat parameter vector."""
    return np.concatenate([a.ravel() for _, a in named_arrays(params)])


def from_vector(template, vec: np.ndarray):
    """Rebuild a params tree shaped like ``template`` from a flat vector."""
    out = copy_params(template)
    offset = 0
    for _, a in named_arrays(out):
        n = a.size
        a[...] = vec[offset: offset + n].reshape(a.shape)
        offset += n
    if offset != vec.size:
        raise ValueError(f"vector has {vec.size} entries, model needs {offset}")
    return out


def add_scaled(acc, grads, scale: float = 1.0) -> None:
    """acc += scale * grads, in place, matching structures."""
    for (_, a), (_, g) in zip(named_arrays(acc), named_arrays(grads)):
        a += scale * g


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    fusion: FusionConfig = field(default_factory=FusionConfig)
    include_unfused_ctc: bool = False
    unfused_ctc_weight: float = 0.1
    blank_id: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class LossBreakdown:
    total: float
    ctc_fused: float
    ar: float
    ctc_unfused: float | None = None


def total_loss(
    params: ModelParams,
    features: np.ndarray,
    labels: tuple[int, ...],
    cfg: LossConfig,
) -> tuple[LossBreakdown, ModelParams]:
    """alpha * fused-CTC loss + (1 - alpha) * AR loss, with all gradients.

    Both branches share the encoder output, so encoder gradients accumulate
    from the CTC projection and the decoder attention. Returns the loss parts
    and a gradient tree shaped like ``params``.
    """
    enc, enc_cache = encoder_forward(params.encoder, features)
    ctc_logits = enc @ params.ctc_w + params.ctc_b
    tf = aed_mod.aed_teacher_forced(params.aed, enc, labels)
    fused = fusion_mod.fused_ctc_loss(
        ctc_logits, tf.step_grid, labels, cfg.fusion, blank_id=cfg.blank_id
    )
    breakdown = LossBreakdown(
        total=cfg.alpha * fused.loss + (1.0 - cfg.alpha) * tf.loss,
        ctc_fused=fused.loss,
        ar=tf.loss,
    )

    d_ctc_logits = cfg.alpha * fused.grad_ctc_logits
    if cfg.include_unfused_ctc:
        plain = ctc_mod.ctc_loss(ctc_logits, labels, blank_id=cfg.blank_id)
        breakdown.ctc_unfused = plain.loss
        breakdown.total += cfg.unfused_ctc_weight * plain.loss
        d_ctc_logits = d_ctc_logits + cfg.unfused_ctc_weight * plain.grad_logits

    # decoder step logits feel both the cross-entropy and the fusion path;
    # the eos-predicting row only exists in the cross-entropy term
    d_step = (1.0 - cfg.alpha) * tf.grad_logits_ce
    d_step[: len(labels)] += cfg.alpha * fused.grad_aed_logits

    grads = zeros_like_params(params)
    grads.ctc_w += enc.T @ d_ctc_logits
    grads.ctc_b += d_ctc_logits.sum(axis=0)
    d_enc = d_ctc_logits @ params.ctc_w.T

    aed_grads, d_enc_from_aed = aed_mod.aed_backward(params.aed, tf.cache, d_step)
    add_scaled(grads.aed, aed_grads)
    d_enc = d_enc + d_enc_from_aed

    enc_grads, _ = encoder_backward(params.encoder, enc_cache, d_enc)
    add_scaled(grads.encoder, enc_grads)
    return breakdown, grads


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    samples: int
    max_rel_err: float
    worst_name: str
    worst_analytic: float
    worst_numeric: float

    def passed(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_err <= rtol


def relative_error(analytic: float, numeric: float, atol: float = 1e-7) -> float:
    """0 when the difference is under ``atol``, else the symmetric relative error."""
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(abs(analytic), abs(numeric))


def grad_check(
    params: ModelParams,
    features: np.ndarray,
    labels: tuple[int, ...],
    cfg: LossConfig,
    samples: int = 100,
    seed: int = 0,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic total_loss gradients against central differences.

    Samples ``samples`` coordinates of the flat parameter vector uniformly
    without replacement (all of them when the model is small enough).
    Deterministic given ``seed``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    _, grads = total_loss(params, features, labels, cfg)
    theta = to_vector(params)
    grad_vec = to_vector(grads)
    names = []
    for name, a in named_arrays(params):
        names.extend([name] * a.size)

    rng = np.random.default_rng(seed)
    k = min(samples, theta.size)
    idx = rng.choice(theta.size, size=k, replace=False)

    worst = (0.0, "", 0.0, 0.0)
    for i in idx:
        bumped = theta.copy()
        bumped[i] = theta[i] + step
        up, _ = total_loss(from_vector(params, bumped), features, labels, cfg)
        bumped[i] = theta[i] - step
        down, _ = total_loss(from_vector(params, bumped), features, labels, cfg)
        numeric = (up.total - down.total) / (2.0 * step)
        rel = relative_error(grad_vec[i], numeric)
        if rel >= worst[0]:
            worst = (rel, names[i], float(grad_vec[i]), numeric)
    return GradCheckReport(
        samples=k,
        max_rel_err=worst[0],
        worst_name=worst[1],
        worst_analytic=worst[2],
        worst_numeric=worst[3],
    )


def average_params(params_list: list[ModelParams]) -> ModelParams:
    """Arithmetic mean of parameter vectors.

    Uses exactly-rounded per-coordinate sums so the result is bit-identical
    under permutation of the input list.
    """
    if not params_list:
        raise ValueError("need at least one parameter set to average")
    first = params_list[0]
    shapes = [a.shape for _, a in named_arrays(first)]
    for other in params_list[1:]:
        if [a.shape for _, a in named_arrays(other)] != shapes:
            raise ValueError("parameter shapes differ; cannot average")
    vecs = np.stack([to_vector(p) for p in params_list])
    mean = np.array([math.fsum(col) for col in vecs.T]) / len(params_list)
    return from_vector(first, mean)
