"""Entropy-guided attention block: entropy map, attention, gating, probes."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from u2cllie import engine as en
from u2cllie import uad
from u2cllie.engine import Params, Tape, Tensor
from u2cllie.uad import (UadParams, cross_attention, entropy_gradient_diagnostic,
                         entropy_map, init_uad, uad_forward, v_path_param_names)


def make(seed=0, channels=4, d_head=4, **kw):
    cfg = UadParams(channels=channels, d_head=d_head, **kw)
    rng = np.random.Generator(np.random.PCG64(seed))
    return cfg, init_uad(cfg, rng)


def entropy_loop(f: np.ndarray) -> np.ndarray:
    """Definition-level oracle: softmax over channels, then -sum p log p / log C."""
    n, c, h, w = f.shape
    out = np.zeros((n, 1, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                logits = f[b, :, i, j]
                e = np.exp(logits - logits.max())
                p = e / e.sum()
                p = np.clip(p, 1e-12, None)
                out[b, 0, i, j] = -(p * np.log(p)).sum() / math.log(c)
    return out


class TestEntropyMap:
    def test_matches_loop_oracle(self):
        f = np.random.default_rng(0).normal(size=(2, 5, 4, 3))
        got = entropy_map(Tensor(f)).map.data
        assert np.max(np.abs(got - entropy_loop(f))) < 1e-9

    def test_uniform_channels_give_one(self):
        f = np.full((1, 8, 4, 4), 1.7)
        got = entropy_map(Tensor(f)).map.data
        assert np.max(np.abs(got - 1.0)) < 1e-7

    def test_dominated_channel_gives_near_zero(self):
        f = np.zeros((1, 4, 3, 3))
        f[0, 2] = 40.0  # one channel crushes the softmax
        got = entropy_map(Tensor(f)).map.data
        assert got.max() < 1e-3

    def test_two_channel_frozen_value(self):
        # logits (log 9, 0) give p = (0.9, 0.1);
        # H = -(0.9 ln 0.9 + 0.1 ln 0.1) / ln 2 = 0.46900
        f = np.zeros((1, 2, 1, 1))
        f[0, 0] = np.log(9.0)
        got = entropy_map(Tensor(f)).map.data[0, 0, 0, 0]
        assert abs(got - 0.4690) < 1e-4

    @given(st.integers(2, 9), st.integers(0, 5000))
    @settings(max_examples=50, deadline=None)
    def test_bounds_property(self, channels, seed):
        f = np.random.Generator(np.random.PCG64(seed)).normal(
            size=(1, channels, 3, 3)) * 5.0
        got = entropy_map(Tensor(f)).map.data
        assert got.min() >= 0.0
        assert got.max() <= 1.0 + 1e-9

    def test_single_channel_rejected(self):
        with pytest.raises(Exception):
            entropy_map(Tensor(np.zeros((1, 1, 2, 2))))


class TestCrossAttention:
    def test_single_token_returns_projected_v(self):
        """With one spatial token the softmax collapses to weight 1."""
        cfg, arrays = make(seed=1)
        p = Params(arrays)
        q = Tensor(np.random.default_rng(2).normal(size=(1, 4, 1, 1)))
        v = Tensor(np.random.default_rng(3).normal(size=(1, 4, 1, 1)))
        out = cross_attention(q, q, v, p, cfg)
        want = en.linear(v, p("uad.v.w"))
        assert np.max(np.abs(out.data - want.data)) < 1e-10

    def test_identical_keys_average_values(self):
        """Constant keys make every attention row uniform."""
        cfg, arrays = make(seed=4)
        p = Params(arrays)
        rng = np.random.default_rng(5)
        q = Tensor(rng.normal(size=(1, 4, 2, 3)))
        k = Tensor(np.full((1, 4, 2, 3), 0.37))
        v = Tensor(rng.normal(size=(1, 4, 2, 3)))
        out = cross_attention(q, k, v, p, cfg)
        v_proj = en.linear(v, p("uad.v.w")).data
        want = np.broadcast_to(v_proj.mean(axis=(2, 3), keepdims=True), v_proj.shape)
        assert np.max(np.abs(out.data - want)) < 1e-9

    def test_two_token_hand_computation(self):
        """2-token attention recomputed with explicit numpy softmax."""
        cfg, arrays = make(seed=6)
        p = Params(arrays)
        rng = np.random.default_rng(7)
        q = Tensor(rng.normal(size=(1, 4, 1, 2)))
        k = Tensor(rng.normal(size=(1, 4, 1, 2)))
        v = Tensor(rng.normal(size=(1, 4, 1, 2)))

        def proj(x, name):
            return np.einsum("oc,nchw->nohw", arrays[name].astype(np.float64), x.data)

        qh = proj(q, "uad.q.w").reshape(cfg.d_head, 2).T   # [T, d]
        qh = qh + arrays["uad.q.b"].astype(np.float64)
        kh = proj(k, "uad.k.w").reshape(cfg.d_head, 2).T
        vh = proj(v, "uad.v.w").reshape(cfg.d_head, 2).T
        logits = qh @ kh.T / np.sqrt(cfg.d_head)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        att = e / e.sum(axis=1, keepdims=True)
        want = (att @ vh).T.reshape(1, cfg.d_head, 1, 2)

        got = cross_attention(q, k, v, p, cfg).data
        assert np.max(np.abs(got - want)) < 1e-6

    def test_key_shift_invariance(self):
        """Adding a constant to every key leaves the attention unchanged."""
        cfg, arrays = make(seed=8)
        p = Params(arrays)
        rng = np.random.default_rng(9)
        q = Tensor(rng.normal(size=(1, 4, 2, 2)))
        k_np = rng.normal(size=(1, 4, 2, 2))
        v = Tensor(rng.normal(size=(1, 4, 2, 2)))
        base = cross_attention(q, Tensor(k_np), v, p, cfg).data
        shifted = cross_attention(q, Tensor(k_np + 3.21), v, p, cfg).data
        assert np.max(np.abs(base - shifted)) < 1e-9


class TestForward:
    def test_output_shape(self):
        cfg, arrays = make(seed=10)
        x = Tensor(np.random.default_rng(11).normal(size=(2, 4, 4, 4)))
        out = uad_forward(x, Params(arrays), cfg)
        assert out.shape == (2, 4, 4, 4)
        assert np.all(np.isfinite(out.data))

    def test_aux_maps_exposed(self):
        cfg, arrays = make(seed=12)
        x = Tensor(np.random.default_rng(13).normal(size=(1, 4, 3, 5)))
        out, aux = uad_forward(x, Params(arrays), cfg, want_aux=True)
        assert aux["entropy"].shape == (1, 1, 3, 5)
        assert aux["frequency"].shape == (1, 4, 3, 5)

    def test_dropout_only_in_training(self):
        cfg, arrays = make(seed=14, dropout=0.5)
        x = Tensor(np.random.default_rng(15).normal(size=(1, 4, 4, 4)))
        eval_a = uad_forward(x, Params(arrays), cfg).data
        eval_b = uad_forward(x, Params(arrays), cfg).data
        train_a = uad_forward(x, Params(arrays), cfg, train=True, dropout_seed=0).data
        train_b = uad_forward(x, Params(arrays), cfg, train=True, dropout_seed=1).data
        assert np.array_equal(eval_a, eval_b)
        assert not np.array_equal(train_a, train_b)

    def test_train_mode_seeded_repeatably(self):
        cfg, arrays = make(seed=16, dropout=0.3)
        x = Tensor(np.random.default_rng(17).normal(size=(1, 4, 4, 4)))
        a = uad_forward(x, Params(arrays), cfg, train=True, dropout_seed=42).data
        b = uad_forward(x, Params(arrays), cfg, train=True, dropout_seed=42).data
        assert np.array_equal(a, b)

    def test_entropy_scale_zero_detaches_v_path(self):
        """At scale 0 every V-path parameter gradient vanishes identically."""
        cfg, arrays = make(seed=18)
        x = np.random.default_rng(19).normal(size=(1, 4, 4, 4))
        tape = Tape()
        p = Params(arrays, tape, dtype=np.float64)
        out = uad_forward(Tensor(x, dtype=np.float64), p, cfg, entropy_scale=0.0)
        grads = tape.backward(en.mean(en.square(out)))
        for name in v_path_param_names(cfg):
            assert np.all(grads[name] == 0.0), name


class TestDiagnostic:
    def test_scale_zero_exact(self):
        cfg, arrays = make(seed=20)
        x = np.random.default_rng(21).normal(size=(1, 4, 4, 4))
        rep = entropy_gradient_diagnostic(arrays, cfg, x, 0.0)
        assert rep["exact_zero"] is True
        assert rep["scaled_norm"] == 0.0

    def test_ratio_tracks_scale_linearly(self):
        cfg, arrays = make(seed=22)
        x = np.random.default_rng(23).normal(size=(1, 4, 6, 6)) * 4.0
        for scale in (0.5, 1.0, 2.0):
            rep = entropy_gradient_diagnostic(arrays, cfg, x, scale)
            assert abs(rep["ratio"] / scale - 1.0) <= 0.05, (scale, rep["ratio"])

    def test_reports_per_param_norms(self):
        cfg, arrays = make(seed=24)
        x = np.random.default_rng(25).normal(size=(1, 4, 4, 4))
        rep = entropy_gradient_diagnostic(arrays, cfg, x, 1.0)
        assert set(rep["per_param"]) == set(v_path_param_names(cfg))
        for entry in rep["per_param"].values():
            assert entry["base"] >= 0
            assert entry["scaled"] >= 0


class TestInit:
    def test_no_key_bias_parameter(self):
        # a shared key shift cancels inside the softmax, so the parameter
        # would be inert; the init must not create one
        _, arrays = make(seed=26)
        assert "uad.k.b" not in arrays
        assert "uad.k.w" in arrays

    def test_v_path_names_subset_of_store(self):
        cfg, arrays = make(seed=27)
        assert set(v_path_param_names(cfg)) <= set(arrays)
