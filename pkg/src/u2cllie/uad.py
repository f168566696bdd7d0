"""Uncertainty-aware dual-domain denoise block.

A spatial branch and a frequency branch meet in a single-head cross
attention whose value stream carries the per-pixel channel entropy of the
frequency features. The value path (entropy embedding and V projection) is
deliberately bias-free: scaling the entropy map scales that path's
gradients proportionally, and a zero map silences them exactly, which is
what the gradient diagnostic below measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import blocks, engine as en
from .engine import Params, ShapeError, Tensor, check_finite
from .g2af import G2afParams, g2af_forward, init_g2af


@dataclass(frozen=True)
class UadParams:
    channels: int
    d_head: int = 64
    se_reduction: int = 4
    dropout: float = 0.1
    prefix: str = "uad"

    @property
    def g2af(self) -> G2afParams:
        return G2afParams(channels=self.channels, prefix=f"{self.prefix}.g2af")


@dataclass
class EntropyMap:
    """Normalized channel entropy per pixel, [N,1,H,W], values in [0,1]."""

    map: Tensor


def init_uad(cfg: UadParams, rng) -> dict:
    c, d = cfg.channels, cfg.d_head
    mid = max(c // cfg.se_reduction, 1)
    store = init_g2af(cfg.g2af, rng)
    pre = cfg.prefix
    # squeeze-excite style channel weighting for the spatial branch
    blocks.init_conv(store, rng, f"{pre}.se1", mid, c, 1)
    blocks.init_conv(store, rng, f"{pre}.se2", c, mid, 1)
    _init_sep_rem(store, rng, f"{pre}.spa_rem", c)
    blocks.init_conv(store, rng, f"{pre}.spa_fuse", c, 2 * c, 1)
    # attention projections; the value path carries no biases on purpose
    store[f"{pre}.q.w"] = blocks.he_linear(rng, d, c)
    store[f"{pre}.q.b"] = blocks.zeros(d)
    # no key bias: a shared shift of every key moves each logit row by a
    # constant, which the softmax cancels, so the parameter would be inert
    store[f"{pre}.k.w"] = blocks.he_linear(rng, d, c)
    store[f"{pre}.embed.w"] = rng.normal(0.0, 0.03, size=(c, 1)).astype(np.float32)
    store[f"{pre}.v.w"] = blocks.he_linear(rng, d, c)
    store[f"{pre}.gate.w"] = blocks.he_linear(rng, c, d)
    store[f"{pre}.gate.b"] = blocks.zeros(c)
    store[f"{pre}.l2g1.w"] = blocks.he_linear(rng, d, d)
    store[f"{pre}.l2g1.b"] = blocks.zeros(d)
    store[f"{pre}.l2g2.w"] = blocks.he_linear(rng, c, d)
    store[f"{pre}.l2g2.b"] = blocks.zeros(c)
    _init_sep_rem(store, rng, f"{pre}.merge_rem", 2 * c)
    blocks.init_conv(store, rng, f"{pre}.merge_proj", c, 2 * c, 1)
    return store


def v_path_param_names(cfg: UadParams):
    """Parameters whose gradients flow only through the attention values."""
    return (f"{cfg.prefix}.embed.w", f"{cfg.prefix}.v.w")


def _init_sep_rem(store, rng, prefix, c):
    store[f"{prefix}.dw.w"] = blocks.he_conv(rng, c, 1, 3)
    store[f"{prefix}.dw.b"] = blocks.zeros(c)
    blocks.init_conv(store, rng, f"{prefix}.pw", c, c, 1)


def _sep_rem(x: Tensor, p: Params, prefix: str) -> Tensor:
    """Separable residual unit: x + 1x1(ReLU(depthwise 3x3(x)))."""
    inner = en.relu(blocks.conv(x, p, f"{prefix}.dw", pad=1, groups=x.shape[1]))
    return en.add(x, blocks.conv(inner, p, f"{prefix}.pw"))


def entropy_map(f: Tensor) -> EntropyMap:
    """Shannon entropy of the channel softmax at each pixel, scaled to [0,1]."""
    c = f.shape[1]
    if c < 2:
        raise ShapeError(f"entropy needs at least 2 channels, got {c}")
    prob = en.softmax(f, axis=1)
    log_prob = en.log(en.maximum(prob, 1e-12))
    ent = en.sum_(en.mul(prob, log_prob), axis=1, keepdims=True) * (-1.0 / math.log(c))
    return EntropyMap(map=ent)


def spatial_branch(f_prev: Tensor, p: Params, cfg: UadParams) -> Tensor:
    """Channel-reweighted features concatenated with a residual pass."""
    pre = cfg.prefix
    pooled = blocks.conv(en.relu(blocks.conv(en.avg_pool_global(f_prev), p, f"{pre}.se1")),
                         p, f"{pre}.se2")
    weights = en.softmax(pooled, axis=1)
    weighted = en.mul(f_prev, weights)
    residual = _sep_rem(f_prev, p, f"{pre}.spa_rem")
    fused = blocks.conv(en.concat([weighted, residual], axis=1), p, f"{pre}.spa_fuse")
    return en.leaky_relu(fused, 0.2)


def cross_attention(q_src: Tensor, k_src: Tensor, v_src: Tensor, p: Params,
                    cfg: UadParams) -> Tensor:
    """Single-head scaled dot-product over pixels-as-tokens."""
    if q_src.shape[2:] != k_src.shape[2:] or q_src.shape[2:] != v_src.shape[2:]:
        raise ShapeError(f"token grids disagree: {q_src.shape[2:]}, "
                         f"{k_src.shape[2:]}, {v_src.shape[2:]}")
    pre = cfg.prefix
    n, _, h, w = q_src.shape
    d = cfg.d_head
    tokens = h * w
    q = en.linear(q_src, p(f"{pre}.q.w"), p(f"{pre}.q.b"))
    k = en.linear(k_src, p(f"{pre}.k.w"))
    v = en.linear(v_src, p(f"{pre}.v.w"))
    q_tok = en.transpose(en.reshape(q, (n, d, tokens)), (0, 2, 1))
    k_mat = en.reshape(k, (n, d, tokens))
    v_tok = en.transpose(en.reshape(v, (n, d, tokens)), (0, 2, 1))
    logits = en.matmul(q_tok, k_mat) * (1.0 / math.sqrt(d))
    attn = en.softmax(logits, axis=-1)
    mixed = en.matmul(attn, v_tok)
    return en.reshape(en.transpose(mixed, (0, 2, 1)), (n, d, h, w))


def uad_forward(f_prev: Tensor, p: Params, cfg: UadParams, entropy_scale=None,
                train: bool = False, dropout_seed=None, want_aux: bool = False):
    """Full block: frequency stage, entropy-valued attention, gated merge.

    ``entropy_scale`` multiplies the entropy map before embedding (the
    diagnostic override); in train mode the local-to-global stack is
    dropout-regularized with an explicit seed.
    """
    pre = cfg.prefix
    c = cfg.channels
    f_freq = check_finite(g2af_forward(f_prev, p, cfg.g2af), "uad frequency stage")
    ent = entropy_map(f_freq).map
    if entropy_scale is not None:
        ent = ent * float(entropy_scale)
    embedded = en.linear(ent, p(f"{pre}.embed.w"))
    spa = spatial_branch(f_prev, p, cfg)
    f_u = check_finite(cross_attention(spa, f_freq, embedded, p, cfg), "uad attention stage")
    gate = en.sigmoid(en.linear(f_u, p(f"{pre}.gate.w"), p(f"{pre}.gate.b")))
    local = en.silu(en.linear(f_u, p(f"{pre}.l2g1.w"), p(f"{pre}.l2g1.b")))
    broad = en.linear(local, p(f"{pre}.l2g2.w"), p(f"{pre}.l2g2.b"))
    broad = en.dropout(broad, cfg.dropout, seed=dropout_seed, training=train)
    f_fre = en.mul(gate, broad)
    merged = en.concat([en.add(f_prev, f_fre), f_freq], axis=1)
    merged = _sep_rem(merged, p, f"{pre}.merge_rem")
    out = check_finite(blocks.conv(merged, p, f"{pre}.merge_proj"), "uad merge stage")
    if want_aux:
        return out, {"entropy": ent, "frequency": f_freq}
    return out


def _v_path_grads(arrays: dict, cfg: UadParams, x_np: np.ndarray, scale, dtype):
    tape = en.Tape()
    p = Params(arrays, tape, dtype=dtype)
    x = Tensor(x_np, dtype=dtype)
    out = uad_forward(x, p, cfg, entropy_scale=scale, train=False)
    target = Tensor(np.zeros(out.shape), dtype=dtype)
    loss = en.mean(en.square(en.sub(out, target)))
    grads = tape.backward(loss)
    return {name: grads[name] for name in v_path_param_names(cfg)}


def entropy_gradient_diagnostic(arrays: dict, cfg: UadParams, x_np: np.ndarray,
                                scale: float, dtype=np.float64) -> dict:
    """Measure how attention V-path gradients respond to entropy scaling.

    Runs the block twice at fixed weights (entropy as produced, then scaled)
    against a fixed mean-square objective and reports per-parameter norms
    and the aggregate ratio. A perfectly linear V path gives ratio == scale.
    """
    base = _v_path_grads(arrays, cfg, x_np, None, dtype)
    scaled = _v_path_grads(arrays, cfg, x_np, scale, dtype)
    base_norm = math.sqrt(sum(float((g * g).sum()) for g in base.values()))
    scaled_norm = math.sqrt(sum(float((g * g).sum()) for g in scaled.values()))
    ratio = scaled_norm / base_norm if base_norm > 0 else float("nan")
    return {
        "scale": float(scale),
        "base_norm": base_norm,
        "scaled_norm": scaled_norm,
        "ratio": ratio,
        "per_param": {name: {"base": float(np.linalg.norm(base[name])),
                             "scaled": float(np.linalg.norm(scaled[name]))}
                      for name in base},
        "exact_zero": bool(all((g == 0).all() for g in scaled.values())) if scale == 0 else None,
    }
