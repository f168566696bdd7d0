"""Luminance front-end: coarse brightness prior and its consumption rule.

The network predicts the normalized luminance gap between a well-lit and a
dark capture; applying the prior divides the Y channel by (1 - prior), which
inverts that target, so a perfect prediction reconstructs the bright Y plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks, engine as en
from .engine import Params, ShapeError, Tensor, check_finite
from .image_io import EPS_DIV, YCRCB_FORWARD, YCRCB_INVERSE, YCRCB_OFFSET

PRIOR_CAP = 0.99

# Seeded start for the prior: sigmoid(BIAS + SLOPE * Y), a logit-linear fit
# of the brightness-gap heuristic 1 - Y/Y_ref around a mid-exposure reference
# Y_ref of roughly 0.55. Dark pixels begin with a confident gap estimate and
# bright pixels with none, so the gap supervision only refines from there.
LUMA_LOGIT_BIAS = 2.8
LUMA_LOGIT_SLOPE = -9.5


@dataclass(frozen=True)
class LenParams:
    """Parameter layout: 1x1 projection to `channels`, a depthwise 3x3,
    `rem_blocks` residual blocks, and a single-channel head."""

    channels: int = 32
    rem_blocks: int = 3
    prefix: str = "len"


@dataclass
class LuminancePrior:
    """Sigmoid-bounded brightness-gap map, shape [N,1,H,W], values in (0,1)."""

    map: Tensor


def init_len(cfg: LenParams, rng) -> dict:
    c1 = cfg.channels
    store = {}
    blocks.init_conv(store, rng, f"{cfg.prefix}.proj", c1, 3, 1)
    store[f"{cfg.prefix}.dw.w"] = blocks.he_conv(rng, c1, 1, 3)
    store[f"{cfg.prefix}.dw.b"] = blocks.zeros(c1)
    for i in range(cfg.rem_blocks):
        blocks.init_conv(store, rng, f"{cfg.prefix}.rem{i}.c1", c1, c1, 3)
        blocks.init_conv(store, rng, f"{cfg.prefix}.rem{i}.c2", c1, c1, 3)
    blocks.init_conv(store, rng, f"{cfg.prefix}.head", 1, c1, 3)
    # carry the luminance plane through channel 0 untouched (identity
    # residuals, center-tap depthwise) and read it off with the logit fit
    store[f"{cfg.prefix}.proj.w"][0] = YCRCB_FORWARD[0].reshape(3, 1, 1).astype(np.float32)
    store[f"{cfg.prefix}.dw.w"][0] = 0.0
    store[f"{cfg.prefix}.dw.w"][0, 0, 1, 1] = 1.0
    for i in range(cfg.rem_blocks):
        store[f"{cfg.prefix}.rem{i}.c2.w"][:] = 0.0
    store[f"{cfg.prefix}.head.w"][:] = 0.0
    store[f"{cfg.prefix}.head.w"][0, 0, 1, 1] = LUMA_LOGIT_SLOPE
    store[f"{cfg.prefix}.head.b"][0] = LUMA_LOGIT_BIAS
    return store


def rem_block(x: Tensor, p: Params, prefix: str) -> Tensor:
    """Residual unit: x + Conv(ReLU(Conv(x))), 3x3 reflect-padded."""
    if p(f"{prefix}.c1.w").shape[1] != x.shape[1]:
        raise ShapeError(f"rem_block channel mismatch at {prefix}: "
                         f"{p(f'{prefix}.c1.w').shape[1]} vs {x.shape[1]}")
    inner = en.relu(blocks.conv(x, p, f"{prefix}.c1", pad=1))
    return en.add(x, blocks.conv(inner, p, f"{prefix}.c2", pad=1))


def len_forward(i_low: Tensor, p: Params, cfg: LenParams = LenParams()) -> LuminancePrior:
    """Predict the brightness-gap map from a [N,3,H,W] input in [0,1]."""
    x = check_finite(blocks.conv(i_low, p, f"{cfg.prefix}.proj"), "len layer 0 (projection)")
    x = check_finite(blocks.conv(x, p, f"{cfg.prefix}.dw", pad=1, groups=x.shape[1]),
                     "len layer 1 (depthwise)")
    for i in range(cfg.rem_blocks):
        x = check_finite(rem_block(x, p, f"{cfg.prefix}.rem{i}"), f"len layer {2 + i} (residual)")
    x = en.relu(x)
    x = check_finite(blocks.conv(x, p, f"{cfg.prefix}.head", pad=1),
                     f"len layer {2 + cfg.rem_blocks} (head)")
    return LuminancePrior(map=en.sigmoid(x))


def len_loss(prior: LuminancePrior, target) -> Tensor:
    """Mean squared error between the prior and the luminance-gap target."""
    pred = prior.map
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"len_loss shapes disagree: {pred.shape} vs {t.shape}")
    return en.mean(en.square(en.sub(pred, t)))


def _color_matrix(x: Tensor, matrix: np.ndarray) -> Tensor:
    return en.linear(x, Tensor(matrix.astype(x.dtype)))


def apply_luminance_prior(i_low: Tensor, prior: LuminancePrior) -> Tensor:
    """Boost luminance by Y' = Y / (1 - min(prior, cap) + eps); keep chroma.

    The cap bounds the amplification at roughly 100x; the epsilon keeps the
    division finite. A zero prior is an identity up to that epsilon.
    """
    if i_low.ndim != 4 or i_low.shape[1] != 3:
        raise ShapeError(f"expected [N,3,H,W] RGB input, got {i_low.shape}")
    offset = Tensor(YCRCB_OFFSET.reshape(1, 3, 1, 1).astype(i_low.dtype))
    ycrcb = en.add(_color_matrix(i_low, YCRCB_FORWARD), offset)
    y = en.narrow(ycrcb, 1, 0, 1)
    chroma = en.narrow(ycrcb, 1, 1, 2)
    capped = en.minimum(prior.map, PRIOR_CAP)
    boosted = en.div(y, (1.0 - capped) + EPS_DIV)
    recombined = en.sub(en.concat([boosted, chroma], axis=1), offset)
    rgb = _color_matrix(recombined, YCRCB_INVERSE)
    return en.clamp(rgb, 0.0, 1.0)
