"""Minimal deterministic tensor engine with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float32 in production, float64 in the
gradient-check shadow mode). Differentiation is tape-based: ops that see a
tape-attached input append a node (inputs, output, backward closure) to that
tape, and ``Tape.backward`` replays the node list in reverse, visiting each
node exactly once. Everything is single-threaded numpy, so identical inputs
and seeds give bit-identical results across runs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class EngineError(RuntimeError):
    """Base error for tensor-engine misuse."""


class ShapeError(EngineError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(EngineError):
    """A NaN or Inf appeared where only finite values are allowed."""


class Tensor:
    """Dense n-d float array, optionally attached to a differentiation tape.

    Data is immutable by convention once constructed; ops return new tensors.
    """

    __slots__ = ("data", "tape", "requires_grad", "name")

    def __init__(self, data, dtype=None, tape=None, requires_grad=False, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d scalars to 1-d; 0-d arrays
            # are always contiguous, so they never reach this branch
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)


class ComplexTensor:
    """Pair of equally-shaped real tensors holding a complex field."""

    __slots__ = ("re", "im")

    def __init__(self, re: Tensor, im: Tensor):
        if re.shape != im.shape:
            raise ShapeError(f"complex parts disagree: {re.shape} vs {im.shape}")
        self.re = re
        self.im = im

    @property
    def shape(self):
        return self.re.shape


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered op recorder owning named leaf parameters.

    Single-writer: exactly one forward/backward pass may use a tape. Nodes
    are appended in evaluation order, which is already topological.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}

    def parameter(self, name: str, data, dtype=None) -> Tensor:
        if name in self.params:
            raise EngineError(f"duplicate parameter name {name!r}")
        t = Tensor(data, dtype=dtype, tape=self, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def record(self, inputs, output, backward):
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> dict:
        """Gradient of a scalar loss w.r.t. every registered parameter.

        Parameters unreachable from the loss get zero gradients.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise EngineError("loss is not attached to this tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        return {name: grads.get(id(p), np.zeros_like(p.data)) for name, p in self.params.items()}


class Params:
    """Accessor over a flat name -> numpy array store.

    Each name is bound at most once per pass: to a tape parameter when a tape
    is given (training / gradient checks) or to a plain constant otherwise
    (inference). An optional dtype override enables the 64-bit shadow mode.
    """

    def __init__(self, arrays: dict, tape: Tape | None = None, dtype=None):
        self.arrays = arrays
        self.tape = tape
        self.dtype = dtype
        self._bound = {}

    def __call__(self, name: str) -> Tensor:
        t = self._bound.get(name)
        if t is None:
            arr = self.arrays[name]
            if self.tape is not None:
                t = self.tape.parameter(name, arr, dtype=self.dtype)
            else:
                t = Tensor(arr, dtype=self.dtype)
            self._bound[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self.arrays


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(inputs, out_data, backward) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise EngineError("operands belong to different tapes")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, dtype=out_data.dtype, tape=tape if requires else None,
                 requires_grad=requires)
    if requires and tape is not None:
        tape.record(tuple(inputs), out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def check_finite(t: Tensor, label: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite values after {label}")
    return t


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _result((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _result((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _result((a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _result((a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def maximum(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    pick_a = a.data >= b.data  # ties route to the first argument
    out = np.where(pick_a, a.data, b.data)
    return _result((a, b), out,
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _result((a, b), out,
                   lambda g: (_unbroadcast(g * pick_a, a.shape),
                              _unbroadcast(g * ~pick_a, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result((a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result((a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result((a,), out, lambda g: (g * (0.5 / out),))


def square(a: Tensor) -> Tensor:
    return _result((a,), a.data * a.data, lambda g: (g * (2.0 * a.data),))


def abs_(a: Tensor) -> Tensor:
    return _result((a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result((a,), out, lambda g: (g * (1.0 - out * out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result((a,), out, lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result((a,), a.data * mask, lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, a.dtype.type(1.0), a.dtype.type(slope))
    return _result((a,), a.data * factor, lambda g: (g * factor,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow for large-magnitude inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _result((a,), out, lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    sig = _stable_sigmoid(a.data)
    out = a.data * sig
    return _result((a,), out, lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for rank {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _result((a,), out, backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True),)

    return _result((a,), np.asarray(out, dtype=a.dtype), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, a.shape) / count).astype(a.dtype, copy=True),)

    return _result((a,), np.asarray(out, dtype=a.dtype), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result((a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result((a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def flip(a: Tensor, axis: int) -> Tensor:
    return _result((a,), np.ascontiguousarray(np.flip(a.data, axis)),
                   lambda g: (np.ascontiguousarray(np.flip(g, axis)),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not 0 <= start <= start + length <= a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range "
                         f"for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _result((a,), np.ascontiguousarray(a.data[idx]), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(tuple(tensors), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return (ga, gb)

    return _result((a, b), out, backward)


# ---------------------------------------------------------------------------
# neural-net ops


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the channel axis of an NCHW tensor: w is [Cout, Cin]."""
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"linear mismatch: x {x.shape}, w {w.shape}")
    out = np.einsum("nchw,oc->nohw", x.data, w.data, optimize=True)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear bias shape {b.shape} != ({w.shape[0]},)")
        out += b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = np.einsum("nohw,oc->nchw", g, w.data, optimize=True)
        gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _result((x, w, b) if b is not None else (x, w), out, backward)


def pad2d(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    """Pad the two trailing spatial axes of an NCHW tensor."""
    if pad < 0:
        raise ShapeError("pad must be non-negative")
    if pad == 0:
        return x
    n, c, h, w = x.shape
    if mode == "zeros":
        out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

        def backward(g):
            return (np.ascontiguousarray(g[:, :, pad:pad + h, pad:pad + w]),)

        return _result((x,), out, backward)
    if mode == "reflect":
        if pad > h - 1 or pad > w - 1:
            raise ShapeError(f"reflect pad {pad} too large for {h}x{w}")
        out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        idx_h = np.pad(np.arange(h), pad, mode="reflect")
        idx_w = np.pad(np.arange(w), pad, mode="reflect")

        def backward(g):
            # scatter-add padded rows/cols back onto their reflected sources
            gt = g.transpose(2, 0, 1, 3)
            acc = np.zeros((h,) + gt.shape[1:], dtype=g.dtype)
            np.add.at(acc, idx_h, gt)
            gt = acc.transpose(1, 2, 0, 3).transpose(3, 0, 1, 2)
            acc = np.zeros((w,) + gt.shape[1:], dtype=g.dtype)
            np.add.at(acc, idx_w, gt)
            return (np.ascontiguousarray(acc.transpose(1, 2, 3, 0)),)

        return _result((x,), out, backward)
    raise EngineError(f"unknown pad mode {mode!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int = 0, groups: int = 1, pad_mode: str = "zeros") -> Tensor:
    """2-d convolution, NCHW layout, kernel [Cout, Cin/groups, kh, kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape} and {w.shape}")
    cin = x.shape[1]
    cout, cg, kh, kw = w.shape
    if cin % groups != 0 or cout % groups != 0 or cg != cin // groups:
        raise ShapeError(f"conv2d group mismatch: Cin={cin}, groups={groups}, kernel {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    if pad < 0:
        raise ShapeError("pad must be non-negative")
    xp = pad2d(x, pad, pad_mode)
    n, _, hp, wp = xp.shape
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp.data, (kh, kw), axis=(2, 3))
    cols = win[:, :, ::stride, ::stride]            # [N, Cin, Ho, Wo, kh, kw]
    colsg = cols.reshape(n, groups, cg, ho, wo, kh, kw)
    wg = w.data.reshape(groups, cout // groups, cg, kh, kw)
    out = np.einsum("ngchwkl,gockl->ngohw", colsg, wg, optimize=True)
    out = np.ascontiguousarray(out.reshape(n, cout, ho, wo))
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gg = g.reshape(n, groups, cout // groups, ho, wo)
        gw = None
        if w.requires_grad:
            gw = np.einsum("ngchwkl,ngohw->gockl", colsg, gg, optimize=True).reshape(w.shape)
        gx = None
        if xp.requires_grad:
            gcols = np.einsum("gockl,ngohw->ngchwkl", wg, gg, optimize=True)
            gcols = gcols.reshape(n, cin, ho, wo, kh, kw)
            gx = np.zeros(xp.shape, dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    gx[:, :, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += gcols[..., ki, kj]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _result((xp, w, b) if b is not None else (xp, w), out, backward)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, pad=(0, 0, 0)) -> Tensor:
    """3-d convolution over [N, C, D, H, W], stride 1, zero padding."""
    if x.ndim != 5 or w.ndim != 5 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d mismatch: x {x.shape}, w {w.shape}")
    cout, cin, kd, kh, kw = w.shape
    pd, ph, pw = pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    n = x.shape[0]
    do = xp.shape[2] - kd + 1
    ho = xp.shape[3] - kh + 1
    wo = xp.shape[4] - kw + 1
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))  # [N,C,do,ho,wo,kd,kh,kw]
    out = np.einsum("ncdhwxyz,ocxyz->nodhw", win, w.data, optimize=True)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        gw = np.einsum("ncdhwxyz,nodhw->ocxyz", win, g, optimize=True)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gcols = np.einsum("ocxyz,nodhw->ncdhwxyz", w.data, g, optimize=True)
        for ki in range(kd):
            for kj in range(kh):
                for kk in range(kw):
                    gxp[:, :, ki:ki + do, kj:kj + ho, kk:kk + wo] += gcols[..., ki, kj, kk]
        gx = gxp[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]]
        gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _result((x, w, b) if b is not None else (x, w), out, backward)


def avg_pool_global(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as size-1: [N,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError("avg_pool_global expects NCHW")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return ((np.broadcast_to(g, x.shape) / (h * w)).astype(g.dtype, copy=True),)

    return _result((x,), out, backward)


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k-by-k average pooling; extents must divide by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool({k}) needs divisible extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gg.astype(g.dtype, copy=False),)

    return _result((x,), out, backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result((x,), out, backward)


def unfold(x: Tensor, k: int) -> Tensor:
    """Extract k*k reflection-padded patches: [N,C,H,W] -> [N,C,k*k,H,W].

    The window is enumerated row-major, so the center sits at index
    (k*k - 1) // 2.
    """
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"unfold needs odd k, got {k}")
    n, c, h, w = x.shape
    xp = pad2d(x, k // 2, "reflect")
    win = sliding_window_view(xp.data, (k, k), axis=(2, 3))  # [N,C,H,W,k,k]
    out = np.ascontiguousarray(win.reshape(n, c, h, w, k * k).transpose(0, 1, 4, 2, 3))

    def backward(g):
        gx = np.zeros(xp.shape, dtype=g.dtype)
        for p in range(k * k):
            ki, kj = divmod(p, k)
            gx[:, :, ki:ki + h, kj:kj + w] += g[:, :, p]
        return (gx,)

    return _result((xp,), out, backward)


def gather_neighbors(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select candidates along axis 2 of [N,C,P,H,W] with indices [N,K,H,W].

    The index set is treated as a constant (straight-through selection):
    gradients scatter back to the chosen slots only.
    """
    if x.ndim != 5 or idx.ndim != 4:
        raise ShapeError(f"gather_neighbors mismatch: x {x.shape}, idx {idx.shape}")
    n, c, p, h, w = x.shape
    kk = idx.shape[1]
    sel = np.broadcast_to(idx[:, None], (n, c, kk, h, w))
    out = np.take_along_axis(x.data, sel, axis=2)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        nn = np.arange(n)[:, None, None, None, None]
        cc = np.arange(c)[None, :, None, None, None]
        hh = np.arange(h)[None, None, None, :, None]
        ww = np.arange(w)[None, None, None, None, :]
        np.add.at(gx, (nn, cc, idx[:, None], hh, ww), g)
        return (gx,)

    return _result((x,), out, backward)


def dropout(x: Tensor, p: float, seed=None, training: bool = True) -> Tensor:
    """Zero values with probability p and rescale by 1/(1-p) in train mode."""
    if not 0.0 <= p < 1.0:
        raise EngineError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if seed is None:
        raise EngineError("train-mode dropout requires an explicit seed")
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result((x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# frequency domain


def fft2(x: Tensor) -> ComplexTensor:
    """Center-shifted 2-d DFT over the trailing spatial axes.

    The zero-frequency bin lands at the spatial center so radial masks built
    on a centered distance grid apply directly.
    """
    if x.ndim != 4:
        raise ShapeError("fft2 expects NCHW")
    h, w = x.shape[2], x.shape[3]
    spec = np.fft.fftshift(np.fft.fft2(x.data, axes=(-2, -1)), axes=(-2, -1))
    scale = h * w

    def backward_re(g):
        t = np.fft.ifft2(np.fft.ifftshift(g, axes=(-2, -1)), axes=(-2, -1))
        return ((scale * t.real).astype(g.dtype, copy=False),)

    def backward_im(g):
        t = np.fft.ifft2(np.fft.ifftshift(g, axes=(-2, -1)), axes=(-2, -1))
        return ((-scale * t.imag).astype(g.dtype, copy=False),)

    re = _result((x,), spec.real.astype(x.dtype, copy=False), backward_re)
    im = _result((x,), spec.imag.astype(x.dtype, copy=False), backward_im)
    return ComplexTensor(re, im)


def ifft2(z: ComplexTensor, return_imag_max: bool = False):
    """Inverse of fft2: unshift, inverse-transform, return the real part.

    With return_imag_max=True also reports max |imaginary residual| as a
    roundtrip diagnostic.
    """
    zc = z.re.data + 1j * z.im.data
    y = np.fft.ifft2(np.fft.ifftshift(zc, axes=(-2, -1)), axes=(-2, -1))
    imag_max = float(np.abs(y.imag).max()) if y.size else 0.0
    dtype = z.re.dtype

    def backward(g):
        t = np.fft.fftshift(np.fft.ifft2(g, axes=(-2, -1)), axes=(-2, -1))
        return (t.real.astype(g.dtype, copy=False), (-t.imag).astype(g.dtype, copy=False))

    out = _result((z.re, z.im), y.real.astype(dtype, copy=False), backward)
    if return_imag_max:
        return out, imag_max
    return out


def complex_abs(z: ComplexTensor) -> Tensor:
    mag = np.hypot(z.re.data, z.im.data)

    def backward(g):
        safe = np.maximum(mag, np.finfo(mag.dtype).tiny)
        return (g * z.re.data / safe, g * z.im.data / safe)

    return _result((z.re, z.im), mag, backward)


def complex_scale(z: ComplexTensor, m: Tensor) -> ComplexTensor:
    """Multiply a complex field by a real (broadcastable) mask."""
    return ComplexTensor(mul(z.re, m), mul(z.im, m))


# ---------------------------------------------------------------------------
# linear recurrence


def linear_scan(x: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """Per-channel diagonal recurrence along axis 0 of [T, lanes, dim].

    h_t = a*h_{t-1} + b*x_t,  y_t = c*h_t + d*x_t, with h_0 = 0 and a, b, c,
    d of shape [dim] broadcast over lanes.
    """
    if x.ndim != 3:
        raise ShapeError("linear_scan expects [T, lanes, dim]")
    steps, lanes, dim = x.shape
    for coef in (a, b, c, d):
        if coef.shape != (dim,):
            raise ShapeError(f"coefficient shape {coef.shape} != ({dim},)")
    av, bv, cv, dv = a.data, b.data, c.data, d.data
    hs = np.empty_like(x.data)
    h = np.zeros((lanes, dim), dtype=x.dtype)
    for t in range(steps):
        h = av * h + bv * x.data[t]
        hs[t] = h
    out = cv * hs + dv * x.data

    def backward(g):
        gx = dv * g
        da = np.zeros(dim, dtype=g.dtype)
        db = np.zeros(dim, dtype=g.dtype)
        dh = np.zeros((lanes, dim), dtype=g.dtype)
        for t in range(steps - 1, -1, -1):
            dh = dh + cv * g[t]
            if t > 0:
                da += (dh * hs[t - 1]).sum(axis=0)
            db += (dh * x.data[t]).sum(axis=0)
            gx[t] += bv * dh
            dh = av * dh
        dc = (g * hs).sum(axis=(0, 1))
        dd = (g * x.data).sum(axis=(0, 1))
        return (gx, da, db, dc, dd)

    return _result((x, a, b, c, d), out, backward)


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_gradient(f, theta, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function of one tensor.

    ``f`` receives a float64 numpy array and must return a scalar (float or
    scalar Tensor); it is evaluated twice at the base point first and
    rejected if the two values differ (non-determinism guard).
    """
    base = theta.data if isinstance(theta, Tensor) else np.asarray(theta)
    work = np.array(base, dtype=np.float64)

    def evaluate():
        r = f(work)
        return float(r.item() if isinstance(r, Tensor) else r)

    if evaluate() != evaluate():
        raise EngineError("fd_gradient requires a deterministic function")
    grad = np.empty_like(work)
    flat = work.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = evaluate()
        flat[i] = keep - eps
        fm = evaluate()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation normalized by the larger gradient magnitude.

    The floor keeps the comparison absolute once both gradients drop below
    1e-6; dividing round-off by round-off would otherwise report large
    relative errors for parameters whose true gradient is essentially zero.
    """
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), 1e-6)
    return float(np.abs(np.asarray(analytic, dtype=np.float64) - numeric).max(initial=0.0) / scale)
