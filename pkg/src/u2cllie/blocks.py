"""Shared building blocks: weight initialization and channel normalization."""

from __future__ import annotations

import numpy as np

from . import engine as en
from .engine import Params, Tensor

NORM_EPS = 1e-5


def he_conv(rng, cout: int, cin: int, kh: int, kw: int | None = None) -> np.ndarray:
    kw = kh if kw is None else kw
    scale = np.sqrt(2.0 / (cin * kh * kw))
    return rng.normal(0.0, scale, size=(cout, cin, kh, kw)).astype(np.float32)


def he_linear(rng, cout: int, cin: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / cin), size=(cout, cin)).astype(np.float32)


def zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float32)


def ones(*shape) -> np.ndarray:
    return np.ones(shape, dtype=np.float32)


def init_norm(store: dict, prefix: str, channels: int) -> None:
    store[f"{prefix}.gamma"] = ones(channels)
    store[f"{prefix}.beta"] = zeros(channels)


def channel_norm(x: Tensor, p: Params, prefix: str) -> Tensor:
    """Layer normalization over the channel axis at every spatial position."""
    c = x.shape[1]
    mu = en.mean(x, axis=1, keepdims=True)
    centered = en.sub(x, mu)
    var = en.mean(en.square(centered), axis=1, keepdims=True)
    normed = en.div(centered, en.sqrt(var + NORM_EPS))
    gamma = en.reshape(p(f"{prefix}.gamma"), (1, c, 1, 1))
    beta = en.reshape(p(f"{prefix}.beta"), (1, c, 1, 1))
    return en.add(en.mul(normed, gamma), beta)


def init_conv(store: dict, rng, prefix: str, cout: int, cin: int, k: int,
              groups: int = 1) -> None:
    store[f"{prefix}.w"] = he_conv(rng, cout, cin // groups, k)
    store[f"{prefix}.b"] = zeros(cout)


def conv(x: Tensor, p: Params, prefix: str, stride: int = 1, pad: int = 0,
         groups: int = 1, pad_mode: str = "reflect") -> Tensor:
    return en.conv2d(x, p(f"{prefix}.w"), p(f"{prefix}.b"), stride=stride,
                     pad=pad, groups=groups, pad_mode=pad_mode)
