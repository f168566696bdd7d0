"""Forward semantics of the tensor ops against plain numpy."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from u2cllie import engine as en
from u2cllie.engine import EngineError, ShapeError, Tensor


def t(a, dtype=np.float64):
    return Tensor(np.asarray(a), dtype=dtype)


def small_arrays(max_side=5, min_dims=1, max_dims=3):
    return st.integers(1, max_side).flatmap(
        lambda n: st.lists(st.integers(1, max_side),
                           min_size=min_dims, max_size=max_dims).map(tuple)
    ).flatmap(lambda shape: st.builds(
        lambda seed: np.random.Generator(np.random.PCG64(seed)).normal(size=shape),
        st.integers(0, 2**31 - 1)))


class TestElementwise:
    def test_add_sub_mul_div(self):
        a = np.array([[1.0, -2.0], [0.5, 3.0]])
        b = np.array([[4.0, 0.25], [-1.0, 2.0]])
        assert np.array_equal(en.add(t(a), t(b)).data, a + b)
        assert np.array_equal(en.sub(t(a), t(b)).data, a - b)
        assert np.array_equal(en.mul(t(a), t(b)).data, a * b)
        assert np.allclose(en.div(t(a), t(b)).data, a / b)

    def test_dunders_coerce_python_scalars(self):
        x = t([1.0, 2.0])
        assert np.array_equal((x * 2.0).data, [2.0, 4.0])
        assert np.array_equal((x + 1.0).data, [2.0, 3.0])
        assert np.array_equal((1.0 - x).data, [0.0, -1.0])
        assert np.array_equal((x / 2.0).data, [0.5, 1.0])

    def test_module_ops_reject_bare_scalars(self):
        # module-level binary ops take two tensors; scalar mixing goes
        # through the dunders
        with pytest.raises((EngineError, AttributeError, TypeError)):
            en.add(t([1.0]), 1.0)

    def test_unary_tables(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        cases = {
            en.relu: np.maximum(x, 0),
            en.neg: -x,
            en.abs_: np.abs(x),
            en.square: x * x,
            en.tanh: np.tanh(x),
            en.exp: np.exp(x),
            en.sigmoid: 1.0 / (1.0 + np.exp(-x)),
            en.silu: x / (1.0 + np.exp(-x)),
        }
        for fn, want in cases.items():
            assert np.allclose(fn(t(x)).data, want), fn.__name__

    def test_leaky_relu_slope(self):
        x = t([-4.0, 4.0])
        assert np.allclose(en.leaky_relu(x, 0.2).data, [-0.8, 4.0])

    def test_log_and_sqrt_domains(self):
        x = np.array([0.25, 1.0, 9.0])
        assert np.allclose(en.log(t(x)).data, np.log(x))
        assert np.allclose(en.sqrt(t(x)).data, np.sqrt(x))

    def test_clamp(self):
        x = t([-1.0, 0.3, 2.0])
        assert np.array_equal(en.clamp(x, 0.0, 1.0).data, [0.0, 0.3, 1.0])

    def test_maximum_minimum_with_scalar(self):
        x = t([-1.0, 2.0])
        assert np.array_equal(en.maximum(x, 0.0).data, [0.0, 2.0])
        assert np.array_equal(en.minimum(x, 1.5).data, [-1.0, 1.5])


class TestReductions:
    def test_sum_axes(self):
        a = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
        assert np.isclose(en.sum_(t(a)).item(), a.sum())
        assert np.allclose(en.sum_(t(a), axis=1).data, a.sum(axis=1))
        assert np.allclose(en.sum_(t(a), axis=(0, 2), keepdims=True).data,
                           a.sum(axis=(0, 2), keepdims=True))

    def test_mean_matches_numpy(self):
        a = np.random.default_rng(0).normal(size=(3, 5))
        assert np.allclose(en.mean(t(a), axis=0).data, a.mean(axis=0))

    @given(small_arrays())
    @settings(max_examples=40, deadline=None)
    def test_mean_is_sum_over_count(self, a):
        assert np.isclose(en.mean(t(a)).item(), a.sum() / a.size)


class TestSoftmax:
    def test_matches_numpy(self):
        a = np.random.default_rng(1).normal(size=(4, 7))
        e = np.exp(a - a.max(axis=1, keepdims=True))
        want = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(en.softmax(t(a), axis=1).data, want)

    def test_shift_invariance(self):
        a = np.random.default_rng(2).normal(size=(3, 5))
        s0 = en.softmax(t(a), axis=1).data
        s1 = en.softmax(t(a + 123.0), axis=1).data
        assert np.allclose(s0, s1)

    @given(small_arrays(min_dims=2, max_dims=2))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one(self, a):
        s = en.softmax(t(a), axis=1).data
        assert np.all(s >= 0)
        assert np.allclose(s.sum(axis=1), 1.0)

    def test_extreme_logits_stay_finite(self):
        a = np.array([[1e4, -1e4, 0.0]])
        s = en.softmax(t(a), axis=1).data
        assert np.all(np.isfinite(s))
        assert np.isclose(s.sum(), 1.0)


class TestShapeOps:
    def test_reshape_transpose_flip_narrow(self):
        a = np.arange(12, dtype=np.float64).reshape(3, 4)
        assert np.array_equal(en.reshape(t(a), (4, 3)).data, a.reshape(4, 3))
        assert np.array_equal(en.transpose(t(a), (1, 0)).data, a.T)
        assert np.array_equal(en.flip(t(a), 0).data, a[::-1])
        assert np.array_equal(en.narrow(t(a), 1, 1, 2).data, a[:, 1:3])

    def test_concat(self):
        a, b = np.ones((2, 3)), np.zeros((2, 2))
        got = en.concat([t(a), t(b)], axis=1).data
        assert np.array_equal(got, np.concatenate([a, b], axis=1))

    def test_narrow_bounds_checked(self):
        with pytest.raises(ShapeError):
            en.narrow(t(np.ones((2, 3))), 1, 2, 5)

    def test_pad2d_zeros_and_reflect(self):
        a = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        z = en.pad2d(t(a), 1).data
        assert z.shape == (1, 1, 5, 5)
        assert z[0, 0, 0].sum() == 0
        r = en.pad2d(t(a), 1, mode="reflect").data
        assert np.array_equal(r[0, 0], np.pad(a[0, 0], 1, mode="reflect"))

    def test_upsample_nearest(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        got = en.upsample_nearest(t(a)).data
        assert np.array_equal(got[0, 0], np.repeat(np.repeat(a[0, 0], 2, 0), 2, 1))


class TestMatmulLinear:
    def test_matmul(self):
        a = np.random.default_rng(3).normal(size=(4, 5))
        b = np.random.default_rng(4).normal(size=(5, 2))
        assert np.allclose(en.matmul(t(a), t(b)).data, a @ b)

    def test_linear_is_channel_map_on_nchw(self):
        x = np.random.default_rng(5).normal(size=(2, 3, 4, 4))
        w = np.random.default_rng(6).normal(size=(7, 3))
        got = en.linear(t(x), t(w)).data
        want = np.einsum("oc,nchw->nohw", w, x)
        assert np.allclose(got, want)

    def test_linear_bias_broadcast(self):
        x = np.ones((1, 2, 2, 2))
        w = np.zeros((3, 2))
        b = np.array([1.0, 2.0, 3.0])
        got = en.linear(t(x), t(w), t(b)).data
        assert np.allclose(got, b.reshape(1, 3, 1, 1) * np.ones((1, 3, 2, 2)))


class TestConv:
    def test_conv2d_matches_direct_loop(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        got = en.conv2d(t(x), t(w), pad=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros((2, 4, 6, 6))
        for n in range(2):
            for o in range(4):
                for i in range(6):
                    for j in range(6):
                        want[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum()
        assert np.allclose(got, want)

    def test_conv2d_stride(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        w = np.ones((1, 1, 2, 2))
        got = en.conv2d(t(x), t(w), stride=2).data
        assert got.shape == (1, 1, 2, 2)
        assert got[0, 0, 0, 0] == x[0, 0, :2, :2].sum()

    def test_conv2d_groups_is_depthwise(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 3, 5, 5))
        w = rng.normal(size=(3, 1, 3, 3))
        got = en.conv2d(t(x), t(w), pad=1, groups=3).data
        for c in range(3):
            single = en.conv2d(t(x[:, c:c + 1]), t(w[c:c + 1]), pad=1).data
            assert np.allclose(got[:, c:c + 1], single)

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            en.conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 3, 3))))


class TestPooling:
    def test_avg_pool(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        got = en.avg_pool(t(x), 2).data
        assert np.allclose(got[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_global_pool(self):
        x = np.random.default_rng(9).normal(size=(2, 3, 4, 5))
        got = en.avg_pool_global(t(x)).data
        assert got.shape == (2, 3, 1, 1)
        assert np.allclose(got[..., 0, 0], x.mean(axis=(2, 3)))


class TestUnfoldGather:
    def test_unfold_center_column_is_input(self):
        x = np.random.default_rng(10).normal(size=(1, 2, 4, 4))
        patches = en.unfold(t(x), 3).data  # [N, C, 9, H, W]
        assert patches.shape == (1, 2, 9, 4, 4)
        assert np.allclose(patches[:, :, 4], x)

    def test_unfold_uses_reflect_border(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        patches = en.unfold(t(x), 3).data
        # top-left pixel, upper-left neighbor reflects to (1, 1)
        assert patches[0, 0, 0, 0, 0] == x[0, 0, 1, 1]

    def test_gather_neighbors_picks_indexed_entries(self):
        rng = np.random.default_rng(11)
        cand = rng.normal(size=(1, 2, 8, 3, 3))
        idx = rng.integers(0, 8, size=(1, 4, 3, 3))
        got = en.gather_neighbors(t(cand), idx).data
        for c in range(2):
            for s in range(4):
                for i in range(3):
                    for j in range(3):
                        assert got[0, c, s, i, j] == cand[0, c, idx[0, s, i, j], i, j]


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = t(np.random.default_rng(12).normal(size=(3, 3)))
        assert np.array_equal(en.dropout(x, 0.5, seed=0, training=False).data, x.data)

    def test_train_mode_scales_survivors(self):
        x = t(np.ones((100, 100)))
        y = en.dropout(x, 0.25, seed=3, training=True).data
        kept = y != 0
        assert np.allclose(y[kept], 1.0 / 0.75)
        # keep rate concentrates near 0.75 on 10k entries
        assert abs(kept.mean() - 0.75) < 0.03

    def test_seeded_masks_repeat(self):
        x = t(np.ones((8, 8)))
        a = en.dropout(x, 0.5, seed=7, training=True).data
        b = en.dropout(x, 0.5, seed=7, training=True).data
        assert np.array_equal(a, b)


class TestTensorBasics:
    def test_zero_dim_input_becomes_scalar_array(self):
        x = Tensor(np.float32(2.0))
        assert x.shape == ()
        assert x.item() == 2.0

    def test_dtype_conversion(self):
        x = Tensor(np.ones(3, dtype=np.float32), dtype=np.float64)
        assert x.dtype == np.float64

    def test_detach_drops_tape(self):
        tape = en.Tape()
        x = Tensor(np.ones(3), tape=tape, requires_grad=True)
        y = (x * 2.0).detach()
        assert y.tape is None
        assert np.array_equal(y.data, 2 * np.ones(3))
