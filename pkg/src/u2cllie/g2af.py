"""Frequency-domain feature enhancement with learnable Gaussian masks.

Features go through a centered 2-d FFT; two Gaussian low-pass masks whose
radii adapt to the spectrum magnitude carve out a low and a high band, and
the inverse transforms are mixed, normalized, and fused back with the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks, engine as en
from .engine import ComplexTensor, Params, ShapeError, Tensor, check_finite

MASK_EPS = 1e-6
LAMBDA_MIX = 0.5


@dataclass(frozen=True)
class G2afParams:
    """Learnable radii (scalar each) plus the conv/norm/activation fuse path."""

    channels: int
    r_low_init: float = 0.3
    r_high_init: float = 0.1
    complementary_high_mask: bool = False
    prefix: str = "g2af"


@dataclass(frozen=True)
class DistGrid:
    """Radial distances from the spatial center, shape [1,1,H,W]."""

    grid: np.ndarray


def init_g2af(cfg: G2afParams, rng) -> dict:
    c = cfg.channels
    store = {
        f"{cfg.prefix}.r_low": np.array(cfg.r_low_init, dtype=np.float32),
        f"{cfg.prefix}.r_high": np.array(cfg.r_high_init, dtype=np.float32),
    }
    blocks.init_conv(store, rng, f"{cfg.prefix}.cba.conv", c, c, 3)
    blocks.init_norm(store, f"{cfg.prefix}.cba.norm", c)
    blocks.init_conv(store, rng, f"{cfg.prefix}.fuse", c, 2 * c, 1)
    return store


def make_dist_grid(h: int, w: int) -> DistGrid:
    """Radial grid from linspace(-1,1) spans along each axis.

    A singleton extent contributes zero distance (there is no off-center
    position to measure), keeping the center-minimum invariant intact.
    """
    if h < 1 or w < 1:
        raise ShapeError(f"grid extents must be >= 1, got {h}x{w}")

    def axis(n):
        return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)

    dist_x = axis(h)[:, None]
    dist_y = axis(w)[None, :]
    grid = np.sqrt(dist_x * dist_x + dist_y * dist_y).astype(np.float32)
    return DistGrid(grid=grid.reshape(1, 1, h, w))


def adaptive_radii(spectrum: ComplexTensor, p: Params, cfg: G2afParams):
    """Per-sample effective radii r * mean(sigmoid(|spectrum|)) in (0, r)."""
    mag = en.complex_abs(spectrum)
    n = mag.shape[0]
    mod = en.mean(en.sigmoid(mag), axis=(1, 2, 3))
    r_low = en.mul(p(f"{cfg.prefix}.r_low"), mod)
    r_high = en.mul(p(f"{cfg.prefix}.r_high"), mod)
    return en.reshape(r_low, (n, 1, 1, 1)), en.reshape(r_high, (n, 1, 1, 1))


def gaussian_masks(grid: DistGrid, r_low_eff: Tensor, r_high_eff: Tensor,
                   complementary_high: bool = False):
    """Gaussian masks exp(-dist^2 / (2 r^2 + eps)), one per band."""
    d2 = Tensor((grid.grid * grid.grid).astype(r_low_eff.dtype))

    def mask(r):
        denom = en.square(r) * 2.0 + MASK_EPS
        return en.exp(en.div(d2, denom) * -1.0)

    low = mask(r_low_eff)
    high = mask(r_high_eff)
    if complementary_high:
        high = 1.0 - high
    return low, high


def frequency_bands(f_prev: Tensor, p: Params, cfg: G2afParams,
                    radii_override=None) -> dict:
    """Spectral split shared by the forward pass and the DFT oracle tests.

    Returns the unweighted low/high inverse transforms plus the masks and
    effective radii. ``radii_override`` takes a pair of plain floats and
    bypasses the adaptive modulation (used for the identity-mask check).
    """
    if f_prev.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] features, got {f_prev.shape}")
    n, _, h, w = f_prev.shape
    spectrum = en.fft2(f_prev)
    check_finite(spectrum.re, "frequency transform (real)")
    check_finite(spectrum.im, "frequency transform (imaginary)")
    if radii_override is None:
        r_low, r_high = adaptive_radii(spectrum, p, cfg)
    else:
        r_low = Tensor(np.full((n, 1, 1, 1), radii_override[0]), dtype=f_prev.dtype)
        r_high = Tensor(np.full((n, 1, 1, 1), radii_override[1]), dtype=f_prev.dtype)
    grid = make_dist_grid(h, w)
    low_mask, high_mask = gaussian_masks(grid, r_low, r_high, cfg.complementary_high_mask)
    band_low = en.ifft2(en.complex_scale(spectrum, low_mask))
    band_high = en.ifft2(en.complex_scale(spectrum, high_mask))
    return {"low": band_low, "high": band_high, "low_mask": low_mask,
            "high_mask": high_mask, "r_low": r_low, "r_high": r_high}


def g2af_forward(f_prev: Tensor, p: Params, cfg: G2afParams) -> Tensor:
    """Dual-band enhancement; output matches the input shape."""
    bands = frequency_bands(f_prev, p, cfg)
    mixed = en.add(bands["low"] * LAMBDA_MIX, bands["high"] * (1.0 - LAMBDA_MIX))
    cba = en.silu(blocks.channel_norm(
        blocks.conv(mixed, p, f"{cfg.prefix}.cba.conv", pad=1), p, f"{cfg.prefix}.cba.norm"))
    fused = blocks.conv(en.concat([cba, f_prev], axis=1), p, f"{cfg.prefix}.fuse")
    return check_finite(fused, "frequency fuse stage")
