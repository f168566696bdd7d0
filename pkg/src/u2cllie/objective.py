"""Training objective: seven weighted loss terms plus reference metrics.

All loss functions take engine tensors and stay differentiable end to end.
The perceptual term uses a frozen, seed-initialized conv stack instead of a
pretrained backbone; its value matters only through its zero point and its
monotone response to distortion, both of which the tests pin down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as en
from .engine import ShapeError, Tensor
from .len_net import LuminancePrior, len_loss

EPS_DIV = 1e-6

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """Term weights; field order mirrors the report."""

    mse: float = 0.95
    ssim: float = 0.01
    per: float = 0.01
    global_: float = 0.1
    color: float = 0.5
    grad: float = 0.1
    len_: float = 0.1

    def as_dict(self):
        return {"mse": self.mse, "ssim": self.ssim, "per": self.per,
                "global": self.global_, "color": self.color,
                "grad": self.grad, "len": self.len_}

    @classmethod
    def from_dict(cls, d):
        names = {"global": "global_", "len": "len_"}
        return cls(**{names.get(k, k): float(v) for k, v in d.items()})


@dataclass
class LossReport:
    """Scalar values of each term and the weighted total for one step."""

    mse: float
    ssim: float
    per: float
    global_: float
    color: float
    grad: float
    len_: float
    total: float

    def as_dict(self):
        return {"mse": self.mse, "ssim": self.ssim, "per": self.per,
                "global": self.global_, "color": self.color,
                "grad": self.grad, "len": self.len_, "total": self.total}


def _require_same_shape(pred: Tensor, gt: Tensor, what: str):
    if pred.shape != gt.shape:
        raise ShapeError(f"{what}: shapes disagree, {pred.shape} vs {gt.shape}")


def loss_mse(pred: Tensor, gt: Tensor) -> Tensor:
    _require_same_shape(pred, gt, "loss_mse")
    return en.mean(en.square(en.sub(pred, gt)))


def _gaussian_window(dtype) -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    return win.astype(dtype)


def _ssim_value(pred: Tensor, gt: Tensor) -> Tensor:
    _require_same_shape(pred, gt, "ssim")
    n, c, h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim needs extents >= {SSIM_WINDOW}, got {h}x{w}")
    win = Tensor(np.broadcast_to(_gaussian_window(pred.dtype), (c, 1, SSIM_WINDOW, SSIM_WINDOW)).copy())

    def smooth(t):
        return en.conv2d(t, win, groups=c)

    mu_p = smooth(pred)
    mu_g = smooth(gt)
    mu_pp = en.square(mu_p)
    mu_gg = en.square(mu_g)
    mu_pg = en.mul(mu_p, mu_g)
    var_p = en.sub(smooth(en.square(pred)), mu_pp)
    var_g = en.sub(smooth(en.square(gt)), mu_gg)
    cov = en.sub(smooth(en.mul(pred, gt)), mu_pg)
    num = en.mul(mu_pg * 2.0 + SSIM_C1, cov * 2.0 + SSIM_C2)
    den = en.mul(mu_pp + mu_gg + SSIM_C1, var_p + var_g + SSIM_C2)
    return en.mean(en.div(num, den))


def loss_ssim(pred: Tensor, gt: Tensor) -> Tensor:
    """1 - mean SSIM, Gaussian 11x11 window on the [0,1] range."""
    return 1.0 - _ssim_value(pred, gt)


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen random conv stack standing in for pretrained features."""

    seed: int
    layers: tuple  # ((weight, bias), ...) numpy arrays

    def features(self, x: Tensor):
        outs = []
        cur = x
        for w, b in self.layers:
            cur = en.relu(en.conv2d(cur, Tensor(w, dtype=x.dtype), Tensor(b, dtype=x.dtype), pad=1))
            outs.append(cur)
        return outs


def make_feature_extractor(seed: int = 0, widths=(8, 16, 16)) -> FeatureExtractor:
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    cin = 3
    for cout in widths:
        w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3)).astype(np.float32)
        b = np.zeros(cout, dtype=np.float32)
        layers.append((w, b))
        cin = cout
    return FeatureExtractor(seed=seed, layers=tuple(layers))


def loss_perceptual(pred: Tensor, gt: Tensor, extractor: FeatureExtractor) -> Tensor:
    _require_same_shape(pred, gt, "loss_perceptual")
    fp = extractor.features(pred)
    fg = extractor.features(gt)
    total = None
    for a, b in zip(fp, fg):
        term = en.mean(en.abs_(en.sub(a, b)))
        total = term if total is None else en.add(total, term)
    return total * (1.0 / len(fp))


def soft_histogram(x: Tensor, bins: int = 32) -> Tensor:
    """Per-channel soft histogram over [0,1] as a softmax distribution.

    Gaussian kernel binning with bandwidth equal to the bin spacing, counts
    averaged over pixels, then softmax over the bin axis. Output is
    [N, C, bins] with rows summing to 1.
    """
    if bins < 2:
        raise ShapeError(f"need at least 2 bins, got {bins}")
    n, c, h, w = x.shape
    centers = np.linspace(0.0, 1.0, bins, dtype=np.float64)
    bw = centers[1] - centers[0]
    centers_t = Tensor(centers.reshape(1, 1, 1, bins).astype(x.dtype))
    flat = en.reshape(x, (n, c, h * w, 1))
    weight = en.exp(en.square(en.sub(flat, centers_t)) * (-1.0 / (2.0 * bw * bw)))
    counts = en.mean(weight, axis=2)
    return en.softmax(counts, axis=-1)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Mean KL(p || q) over leading axes; distributions live on the last axis."""
    _require_same_shape(p, q, "kl_divergence")
    tiny = 1e-12
    ratio = en.log(en.maximum(p, tiny)) - en.log(en.maximum(q, tiny))
    per_row = en.sum_(en.mul(p, ratio), axis=-1)
    return en.mean(per_row)


def loss_global(pred: Tensor, gt: Tensor, bins: int = 32) -> Tensor:
    """Histogram alignment: KL(gt distribution || pred distribution)."""
    _require_same_shape(pred, gt, "loss_global")
    return kl_divergence(soft_histogram(gt, bins), soft_histogram(pred, bins))


def loss_color(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean per-pixel (1 - cosine) between RGB vectors.

    Both the dot product and the norm product carry the same epsilon so that
    identical pixels (including pure black) score exactly zero.
    """
    _require_same_shape(pred, gt, "loss_color")
    if pred.shape[1] != 3:
        raise ShapeError(f"loss_color expects 3 channels, got {pred.shape[1]}")
    dot = en.sum_(en.mul(pred, gt), axis=1)
    norm_p = en.sqrt(en.sum_(en.square(pred), axis=1) + EPS_DIV)
    norm_g = en.sqrt(en.sum_(en.square(gt), axis=1) + EPS_DIV)
    # the norm product of two identical pixels is exactly sum^2 + eps, so the
    # numerator carries the same eps and identical pixels (pure black
    # included) score exactly zero; AM-GM keeps the ratio <= 1 otherwise
    cos = en.div(dot + EPS_DIV, en.mul(norm_p, norm_g))
    return en.mean(1.0 - cos)


def loss_grad(pred: Tensor, gt: Tensor) -> Tensor:
    """L1 gap between forward-difference gradients along H and W."""
    _require_same_shape(pred, gt, "loss_grad")
    n, c, h, w = pred.shape

    def dh(t):
        return en.sub(en.narrow(t, 2, 1, h - 1), en.narrow(t, 2, 0, h - 1))

    def dw(t):
        return en.sub(en.narrow(t, 3, 1, w - 1), en.narrow(t, 3, 0, w - 1))

    term_h = en.mean(en.abs_(en.sub(dh(pred), dh(gt))))
    term_w = en.mean(en.abs_(en.sub(dw(pred), dw(gt))))
    return en.add(term_h, term_w)


def total_loss(pred: Tensor, gt: Tensor, len_prior: LuminancePrior | None, len_target,
               weights: LossWeights = LossWeights(), extractor: FeatureExtractor | None = None,
               bins: int = 32):
    """Weighted sum of all seven terms; returns (total tensor, report).

    A missing prior (luminance front-end disabled) zeroes its term.
    """
    if extractor is None:
        extractor = make_feature_extractor()
    if len_prior is None:
        len_term = Tensor(np.zeros((), dtype=pred.dtype))
    else:
        len_term = len_loss(len_prior, len_target)
    terms = {
        "mse": loss_mse(pred, gt),
        "ssim": loss_ssim(pred, gt),
        "per": loss_perceptual(pred, gt, extractor),
        "global_": loss_global(pred, gt, bins),
        "color": loss_color(pred, gt),
        "grad": loss_grad(pred, gt),
        "len_": len_term,
    }
    total = None
    for name, term in terms.items():
        weighted = term * float(getattr(weights, name))
        total = weighted if total is None else en.add(total, weighted)
    report = LossReport(**{k: v.item() for k, v in terms.items()}, total=total.item())
    return total, report


def psnr(pred, gt) -> float:
    """Peak signal-to-noise in dB against a unit peak, capped at 100 dB."""
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"psnr: shapes disagree, {p.shape} vs {g.shape}")
    mse = float(np.mean((p - g) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * np.log10(1.0 / mse)


def ssim_metric(pred, gt) -> float:
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float32))
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=np.float32))
    return _ssim_value(p, g).item()
