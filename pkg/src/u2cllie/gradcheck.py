"""Finite-difference verification harness for every differentiable block.

Each check builds a small instance in 64-bit shadow mode, computes analytic
gradients off one tape, then re-evaluates the loss with central differences
parameter by parameter. Losses are pure functions of the parameter store, so
the comparison is exact up to truncation error.
"""

from __future__ import annotations

import numpy as np

from . import causal, engine as en, g2af, len_net, objective, uad
from .engine import Params, Tensor

MODULES = ("len", "g2af", "uad", "neco", "asc", "losses")


def _grad_report(arrays: dict, loss_fn, eps: float = 1e-4) -> dict:
    """Max relative error per parameter, analytic vs central differences.

    The step is smaller than fd_gradient's default: normalization layers give
    the loss enough curvature that the O(eps^2) truncation term would eat
    most of the 1e-3 tolerance budget.
    """
    tape = en.Tape()
    loss = loss_fn(Params(arrays, tape, dtype=np.float64))
    analytic = tape.backward(loss)
    report = {}
    # only parameters the loss actually touched end up bound to the tape
    for name in sorted(analytic):
        def f(theta, name=name):
            p = Params({**arrays, name: theta}, en.Tape(), dtype=np.float64)
            return loss_fn(p)

        fd = en.fd_gradient(f, arrays[name], eps=eps)
        report[name] = en.max_rel_error(analytic[name], fd)
    return report


def _rand(rng, *shape, lo=0.0, hi=1.0):
    return (rng.random(shape) * (hi - lo) + lo).astype(np.float32)


def check_len(seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = len_net.LenParams(channels=4, rem_blocks=2)
    arrays = len_net.init_len(cfg, rng)
    # the seeded init zeroes whole layers; jitter every array so no path is
    # structurally dead during the check
    arrays = {k: v + rng.normal(0.0, 0.05, size=v.shape).astype(v.dtype)
              for k, v in arrays.items()}
    x = Tensor(_rand(rng, 1, 3, 6, 6), dtype=np.float64)
    target = Tensor(_rand(rng, 1, 1, 6, 6), dtype=np.float64)

    def loss(p):
        prior = len_net.len_forward(x, p, cfg)
        boosted = len_net.apply_luminance_prior(x, prior)
        return en.add(len_net.len_loss(prior, target), en.mean(boosted))

    return _grad_report(arrays, loss)


def check_g2af(seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = g2af.G2afParams(channels=3)
    arrays = g2af.init_g2af(cfg, rng)
    x = Tensor(rng.normal(size=(1, 3, 6, 6)), dtype=np.float64)
    target = Tensor(rng.normal(size=(1, 3, 6, 6)), dtype=np.float64)

    def loss(p):
        return en.mean(en.square(en.sub(g2af.g2af_forward(x, p, cfg), target)))

    return _grad_report(arrays, loss)


def check_uad(seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = uad.UadParams(channels=4, d_head=4)
    arrays = uad.init_uad(cfg, rng)
    x = Tensor(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)
    target = Tensor(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)

    def loss(p):
        return en.mean(en.square(en.sub(uad.uad_forward(x, p, cfg), target)))

    return _grad_report(arrays, loss)


def check_neco(seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = causal.NecoParams(channels=3)
    arrays = causal.init_neco(cfg, rng)
    x = Tensor(rng.normal(size=(1, 3, 4, 5)), dtype=np.float64)
    target = Tensor(rng.normal(size=(1, 3, 4, 5)), dtype=np.float64)

    def loss(p):
        return en.mean(en.square(en.sub(causal.neco_forward(x, p, cfg), target)))

    return _grad_report(arrays, loss)


def check_asc(seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = causal.AscParams(channels=3, k=3, patch=3)
    arrays = causal.init_asc(cfg, rng)
    x = Tensor(rng.normal(size=(1, 3, 6, 6)), dtype=np.float64)
    target = Tensor(rng.normal(size=(1, 3, 6, 6)), dtype=np.float64)

    def loss(p):
        return en.mean(en.square(en.sub(causal.asc_forward(x, p, cfg), target)))

    return _grad_report(arrays, loss)


def check_losses(seed: int) -> dict:
    """Differentiate each objective term through a two-parameter toy model."""
    rng = np.random.Generator(np.random.PCG64(seed))
    x = Tensor(_rand(rng, 1, 3, 16, 16), dtype=np.float64)
    gt = Tensor(_rand(rng, 1, 3, 16, 16), dtype=np.float64)
    len_target = Tensor(_rand(rng, 1, 1, 16, 16), dtype=np.float64)
    arrays = {
        "toy.pred.w": (rng.normal(size=(3, 3, 1, 1)) * 0.5).astype(np.float32),
        "toy.pred.b": np.zeros(3, dtype=np.float32),
        "toy.prior.w": (rng.normal(size=(1, 3, 1, 1)) * 0.5).astype(np.float32),
    }
    extractor = objective.make_feature_extractor(seed=seed)

    def pred_of(p):
        return en.sigmoid(en.conv2d(x, p("toy.pred.w"), p("toy.pred.b")))

    def prior_of(p):
        return len_net.LuminancePrior(map=en.sigmoid(en.conv2d(x, p("toy.prior.w"))))

    terms = {
        "mse": lambda p: objective.loss_mse(pred_of(p), gt),
        "ssim": lambda p: objective.loss_ssim(pred_of(p), gt),
        "per": lambda p: objective.loss_perceptual(pred_of(p), gt, extractor),
        "global": lambda p: objective.loss_global(pred_of(p), gt),
        "color": lambda p: objective.loss_color(pred_of(p), gt),
        "grad": lambda p: objective.loss_grad(pred_of(p), gt),
        "len": lambda p: len_net.len_loss(prior_of(p), len_target),
    }
    report = {}
    for term_name, fn in terms.items():
        for pname, err in _grad_report(arrays, fn).items():
            report[f"{term_name}:{pname}"] = err
    return report


def check_entropy_diagnostic(seed: int) -> dict:
    """Criterion-style entropy-scale measurements on a small block."""
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = uad.UadParams(channels=4, d_head=4)
    arrays = uad.init_uad(cfg, rng)
    x = rng.normal(size=(1, 4, 4, 4))
    zero = uad.entropy_gradient_diagnostic(arrays, cfg, x, 0.0)
    report = {"scale_zero_exact": bool(zero["exact_zero"]), "ratios": {}}
    for scale in (0.5, 1.0, 2.0):
        r = uad.entropy_gradient_diagnostic(arrays, cfg, x, scale)
        report["ratios"][str(scale)] = r["ratio"]
    report["linear_within_5pct"] = all(
        abs(report["ratios"][str(s)] / s - 1.0) <= 0.05 for s in (0.5, 1.0, 2.0))
    return report


_CHECKS = {
    "len": check_len,
    "g2af": check_g2af,
    "uad": check_uad,
    "neco": check_neco,
    "asc": check_asc,
    "losses": check_losses,
}


def run_gradcheck(module: str = "all", seed: int = 0, tol: float = 1e-3) -> dict:
    """Full report for one module or all of them; 'pass' reflects tol."""
    names = list(MODULES) if module == "all" else [module]
    for name in names:
        if name not in _CHECKS:
            raise KeyError(f"unknown gradcheck module {name!r}")
    modules = {}
    worst_name, worst = None, -1.0
    for name in names:
        errors = _CHECKS[name](seed)
        local_worst = max(errors, key=errors.get)
        entry = {"params": errors, "max": errors[local_worst],
                 "worst_param": local_worst, "pass": errors[local_worst] <= tol}
        if name == "uad":
            diag = check_entropy_diagnostic(seed)
            entry["entropy_diagnostic"] = diag
            entry["pass"] = entry["pass"] and diag["scale_zero_exact"] and diag["linear_within_5pct"]
        modules[name] = entry
        if errors[local_worst] > worst:
            worst, worst_name = errors[local_worst], f"{name}:{local_worst}"
    return {
        "seed": seed,
        "tol": tol,
        "modules": modules,
        "worst": {"param": worst_name, "error": worst},
        "pass": all(m["pass"] for m in modules.values()),
    }
