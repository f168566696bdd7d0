"""Asymmetric context modeling: scan-based encoder and top-k decoder blocks.

The encoder block (neighborhood-correlation scan) runs a diagonal linear
recurrence over rows and columns in both directions, each direction with its
own learnable input offset, and averages the four passes. The decoder block
(spatial-color calibration) picks the k nearest neighbors of every pixel in
feature space from a 5x5 window and re-fuses their weighted differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks, engine as en
from .engine import Params, ShapeError, Tensor, check_finite

EPS_DIV = 1e-6

# scan direction indices: row/column x forward/backward
ROW_FWD, ROW_BWD, COL_FWD, COL_BWD = 0, 1, 2, 3


@dataclass(frozen=True)
class SsmParams:
    """Diagonal recurrence coefficients plus per-direction input offsets.

    The state multiplier is stored pre-tanh so |A| <= 1 by construction.
    """

    dim: int
    prefix: str = "ssm"


@dataclass(frozen=True)
class NecoParams:
    channels: int
    prefix: str = "neco"

    @property
    def ssm(self) -> SsmParams:
        return SsmParams(dim=self.channels, prefix=f"{self.prefix}.ssm")


@dataclass(frozen=True)
class AscParams:
    channels: int
    k: int = 8
    patch: int = 5
    prefix: str = "asc"


def init_ssm(cfg: SsmParams, rng) -> dict:
    d = cfg.dim
    return {
        f"{cfg.prefix}.a_raw": rng.normal(0.55, 0.1, size=d).astype(np.float32),
        f"{cfg.prefix}.b": rng.normal(0.0, 0.2, size=d).astype(np.float32),
        f"{cfg.prefix}.c": rng.normal(0.0, 0.2, size=d).astype(np.float32),
        f"{cfg.prefix}.d": np.ones(d, dtype=np.float32),
        f"{cfg.prefix}.tau": np.zeros((4, d), dtype=np.float32),
    }


def init_neco(cfg: NecoParams, rng) -> dict:
    c = cfg.channels
    store = init_ssm(cfg.ssm, rng)
    pre = cfg.prefix
    store[f"{pre}.near.w"] = blocks.he_conv(rng, c, 1, 3)
    store[f"{pre}.near.b"] = blocks.zeros(c)
    store[f"{pre}.in_proj.w"] = blocks.he_linear(rng, c, c)
    store[f"{pre}.in_proj.b"] = blocks.zeros(c)
    store[f"{pre}.dw.w"] = blocks.he_conv(rng, c, 1, 3)
    store[f"{pre}.dw.b"] = blocks.zeros(c)
    blocks.init_norm(store, f"{pre}.norm", c)
    store[f"{pre}.gate.w"] = blocks.he_linear(rng, c, c)
    store[f"{pre}.gate.b"] = blocks.zeros(c)
    store[f"{pre}.out_proj.w"] = blocks.he_linear(rng, c, c)
    store[f"{pre}.out_proj.b"] = blocks.zeros(c)
    return store


def init_asc(cfg: AscParams, rng) -> dict:
    if cfg.patch % 2 == 0 or cfg.patch < 3:
        raise ShapeError(f"patch must be odd and >= 3, got {cfg.patch}")
    if cfg.k >= cfg.patch * cfg.patch:
        raise ShapeError(f"k={cfg.k} must be < patch^2={cfg.patch * cfg.patch}")
    c = cfg.channels
    mid = max(c // 2, 4)
    pre = cfg.prefix
    store = {}
    store[f"{pre}.csco.w"] = blocks.he_linear(rng, c, c)
    store[f"{pre}.csco.b"] = blocks.zeros(c)
    store[f"{pre}.cluster1.w"] = _he_conv3d(rng, mid, 2 * c)
    store[f"{pre}.cluster1.b"] = blocks.zeros(mid)
    store[f"{pre}.cluster2.w"] = _he_conv3d(rng, c, mid)
    store[f"{pre}.cluster2.b"] = blocks.zeros(c)
    blocks.init_conv(store, rng, f"{pre}.fuse", c, 2 * c, 1)
    return store


def _he_conv3d(rng, cout, cin):
    # kernel (3,1,1): mixes along the neighbor axis only
    scale = np.sqrt(2.0 / (cin * 3))
    return rng.normal(0.0, scale, size=(cout, cin, 3, 1, 1)).astype(np.float32)


# ---------------------------------------------------------------------------
# scans


def ssm_scan_1d(seq: Tensor, p: Params, cfg: SsmParams, direction_index: int) -> Tensor:
    """Recurrence over a [T, dim] sequence with the chosen direction's offset.

    h_t = A h_{t-1} + B (x_t + tau), y_t = C h_t + D (x_t + tau), h_0 = 0.
    """
    if seq.ndim != 2 or seq.shape[1] != cfg.dim:
        raise ShapeError(f"expected [T, {cfg.dim}] sequence, got {seq.shape}")
    if direction_index not in (0, 1, 2, 3):
        raise ShapeError(f"direction index must be 0..3, got {direction_index}")
    steps = seq.shape[0]
    tau = en.reshape(en.narrow(p(f"{cfg.prefix}.tau"), 0, direction_index, 1), (cfg.dim,))
    shifted = en.add(en.reshape(seq, (steps, 1, cfg.dim)), tau)
    a = en.tanh(p(f"{cfg.prefix}.a_raw"))
    y = en.linear_scan(shifted, a, p(f"{cfg.prefix}.b"), p(f"{cfg.prefix}.c"),
                       p(f"{cfg.prefix}.d"))
    return en.reshape(y, (steps, cfg.dim))


def _scan_lanes(lanes: Tensor, p: Params, cfg: SsmParams, direction_index: int) -> Tensor:
    """linear_scan over [T, lanes, dim] with the direction's offset added."""
    tau = en.reshape(en.narrow(p(f"{cfg.prefix}.tau"), 0, direction_index, 1), (cfg.dim,))
    a = en.tanh(p(f"{cfg.prefix}.a_raw"))
    return en.linear_scan(en.add(lanes, tau), a, p(f"{cfg.prefix}.b"),
                          p(f"{cfg.prefix}.c"), p(f"{cfg.prefix}.d"))


def scan_2d(f: Tensor, p: Params, cfg: SsmParams) -> Tensor:
    """Average of four directional scans over rows and columns.

    Every row (or column) is an independent scan line: the state resets at
    line starts, so lines batch together as scan lanes.
    """
    if f.ndim != 4 or f.shape[1] != cfg.dim:
        raise ShapeError(f"expected [N, {cfg.dim}, H, W] features, got {f.shape}")
    n, c, h, w = f.shape

    rows = en.reshape(en.transpose(f, (3, 0, 2, 1)), (w, n * h, c))
    cols = en.reshape(en.transpose(f, (2, 0, 3, 1)), (h, n * w, c))

    def rows_back(y):
        return en.transpose(en.reshape(y, (w, n, h, c)), (1, 3, 2, 0))

    def cols_back(y):
        return en.transpose(en.reshape(y, (h, n, w, c)), (1, 3, 0, 2))

    out_rf = rows_back(_scan_lanes(rows, p, cfg, ROW_FWD))
    out_rb = rows_back(en.flip(_scan_lanes(en.flip(rows, 0), p, cfg, ROW_BWD), 0))
    out_cf = cols_back(_scan_lanes(cols, p, cfg, COL_FWD))
    out_cb = cols_back(en.flip(_scan_lanes(en.flip(cols, 0), p, cfg, COL_BWD), 0))
    return en.add(en.add(out_rf, out_rb), en.add(out_cf, out_cb)) * 0.25


def neco_forward(f1: Tensor, p: Params, cfg: NecoParams) -> Tensor:
    """Scan branch gated by a pointwise branch, projected back to C channels."""
    pre = cfg.prefix
    x = blocks.conv(f1, p, f"{pre}.near", pad=1, groups=f1.shape[1])
    x = en.linear(x, p(f"{pre}.in_proj.w"), p(f"{pre}.in_proj.b"))
    x = blocks.conv(x, p, f"{pre}.dw", pad=1, groups=x.shape[1])
    x = en.silu(x)
    x = check_finite(scan_2d(x, p, cfg.ssm), "scan stage")
    x = blocks.channel_norm(x, p, f"{pre}.norm")
    gate = en.silu(en.linear(f1, p(f"{pre}.gate.w"), p(f"{pre}.gate.b")))
    out = en.linear(en.mul(x, gate), p(f"{pre}.out_proj.w"), p(f"{pre}.out_proj.b"))
    return check_finite(out, "scan block output")


# ---------------------------------------------------------------------------
# top-k spatial-color calibration


def select_neighbors(f_hat: np.ndarray, patch: int, k: int):
    """Indices of the k closest window candidates per pixel, center excluded.

    Distances are channel-space L2, normalized per pixel by the maximum
    candidate distance; ties break toward the lower candidate index via a
    stable sort. Selection is a plain numpy computation: the chosen index
    set acts as a constant during differentiation.
    """
    n, c, h, w = f_hat.shape
    p2 = patch * patch
    center = (p2 - 1) // 2
    pad = patch // 2
    padded = np.pad(f_hat, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch), axis=(2, 3))
    patches = win.reshape(n, c, h, w, p2).transpose(0, 1, 4, 2, 3)
    cand = np.delete(patches, center, axis=2)
    diff = cand - patches[:, :, center:center + 1]
    dist = np.sqrt((diff * diff).sum(axis=1))          # [N, P-1, H, W]
    dist = dist / (dist.max(axis=1, keepdims=True) + EPS_DIV)
    order = np.argsort(dist, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k])


def asc_forward(f_hat: Tensor, p: Params, cfg: AscParams) -> Tensor:
    """Top-k neighbor calibration; output matches the input shape."""
    if cfg.k >= cfg.patch * cfg.patch:
        raise ShapeError(f"k={cfg.k} must be < patch^2={cfg.patch * cfg.patch}")
    pre = cfg.prefix
    n, c, h, w = f_hat.shape
    p2 = cfg.patch * cfg.patch
    center = (p2 - 1) // 2
    patches = en.unfold(f_hat, cfg.patch)
    f_c = en.narrow(patches, 2, center, 1)
    candidates = en.concat([en.narrow(patches, 2, 0, center),
                            en.narrow(patches, 2, center + 1, p2 - center - 1)], axis=2)
    idx = select_neighbors(f_hat.data, cfg.patch, cfg.k)
    chosen = en.gather_neighbors(candidates, idx)
    diffs = en.sub(chosen, f_c)
    norm = en.sqrt(en.sum_(en.square(diffs), axis=1, keepdims=True) + EPS_DIV)
    normed = en.div(diffs, norm)
    neighbor = _channel_mix_5d(normed, p(f"{pre}.csco.w"), p(f"{pre}.csco.b"))
    center_b = en.mul(f_c, Tensor(np.ones((1, 1, cfg.k, 1, 1), dtype=f_hat.dtype)))
    cluster_in = en.concat([center_b, neighbor], axis=1)
    hidden = en.silu(en.conv3d(cluster_in, p(f"{pre}.cluster1.w"), p(f"{pre}.cluster1.b"),
                               pad=(1, 0, 0)))
    cluster = en.sigmoid(en.conv3d(hidden, p(f"{pre}.cluster2.w"), p(f"{pre}.cluster2.b"),
                                   pad=(1, 0, 0)))
    relation = en.sum_(en.mul(cluster, neighbor), axis=2)
    out = blocks.conv(en.concat([relation, f_hat], axis=1), p, f"{pre}.fuse")
    return check_finite(out, "calibration output")


def _channel_mix_5d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply a channel linear map to a [N,C,K,H,W] tensor."""
    n, c, k, h, w_ = x.shape
    flat = en.reshape(x, (n, c, k * h, w_))
    mixed = en.linear(flat, w, b)
    return en.reshape(mixed, (n, w.shape[0], k, h, w_))
