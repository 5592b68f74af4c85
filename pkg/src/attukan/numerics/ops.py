"""Differentiable primitives.

Every primitive is a class with a static ``forward(ctx, *arrays, **attrs)``
and ``backward(ctx, grad_out)`` pair, registered by name in :data:`PRIMITIVES`.
The public functions below wrap :func:`apply`, which records a node on the
active tape when any input requires a gradient.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Node, Tensor, current_tape

PRIMITIVES: dict[str, type] = {}


def primitive(name: str):
    def register(cls):
        if name in PRIMITIVES:
            raise ValueError(f"primitive {name!r} registered twice")
        cls.name = name
        PRIMITIVES[name] = cls
        return cls

    return register


def apply(prim, *inputs, **attrs) -> Tensor:
    dtype = next((x.data.dtype for x in inputs if isinstance(x, Tensor)), np.float64)
    tensors = tuple(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype)) for x in inputs)
    ctx = SimpleNamespace()
    out = Tensor(prim.forward(ctx, *(t.data for t in tensors), **attrs))
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(Node(prim.name, out, tensors, ctx, lambda c, g, p=prim: p.backward(c, g)))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


@primitive("add")
class Add:
    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@primitive("sub")
class Sub:
    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@primitive("mul")
class Mul:
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g * ctx.b, ctx.a.shape), _unbroadcast(g * ctx.a, ctx.b.shape)


@primitive("div")
class Div:
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@primitive("neg")
class Neg:
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


@primitive("exp")
class Exp:
    @staticmethod
    def forward(ctx, a):
        ctx.out = np.exp(a)
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out,)


@primitive("log")
class Log:
    @staticmethod
    def forward(ctx, a):
        ctx.a = a
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)


@primitive("relu")
class Relu:
    @staticmethod
    def forward(ctx, a):
        ctx.pos = a > 0
        return np.where(ctx.pos, a, 0).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.pos,)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@primitive("sigmoid")
class Sigmoid:
    @staticmethod
    def forward(ctx, a):
        ctx.out = _sigmoid(a)
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        s = ctx.out
        return (g * s * (1 - s),)


def silu_grad(a: np.ndarray) -> np.ndarray:
    s = _sigmoid(a)
    return s * (1 + a * (1 - s))


@primitive("silu")
class Silu:
    @staticmethod
    def forward(ctx, a):
        ctx.a = a
        return a * _sigmoid(a)

    @staticmethod
    def backward(ctx, g):
        return (g * silu_grad(ctx.a),)


@primitive("clip")
class Clip:
    @staticmethod
    def forward(ctx, a, *, lo, hi):
        ctx.inside = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.inside,)


# ---------------------------------------------------------------- reductions / shape


@primitive("sum")
class Sum:
    @staticmethod
    def forward(ctx, a, *, axis=None, keepdims=False):
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


@primitive("reshape")
class Reshape:
    @staticmethod
    def forward(ctx, a, *, shape):
        ctx.shape = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


@primitive("transpose")
class Transpose:
    @staticmethod
    def forward(ctx, a, *, axes):
        ctx.inv = tuple(np.argsort(axes))
        return np.ascontiguousarray(a.transpose(axes))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(g.transpose(ctx.inv)),)


@primitive("concat")
class Concat:
    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.axis = axis
        ctx.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, ctx.splits, axis=ctx.axis))


@primitive("matmul")
class Matmul:
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@primitive("logsumexp")
class LogSumExp:
    """log Σ exp over ``axis``, restricted to entries where ``where`` is true."""

    @staticmethod
    def forward(ctx, a, *, axis, where=None):
        if where is None:
            where = np.ones(a.shape, dtype=bool)
        where = np.broadcast_to(where, a.shape)
        masked = np.where(where, a, -np.inf)
        m = masked.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(where, np.exp(masked - m), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        ctx.softmax = e / s
        ctx.axis = axis
        return (np.log(s) + m).squeeze(axis).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        return (np.expand_dims(g, ctx.axis) * ctx.softmax,)


@primitive("l2_normalize")
class L2Normalize:
    @staticmethod
    def forward(ctx, a, *, axis, eps=1e-12):
        norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
        norm = np.maximum(norm, eps)
        ctx.out, ctx.norm, ctx.axis = a / norm, norm, axis
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        y = ctx.out
        return ((g - y * (g * y).sum(axis=ctx.axis, keepdims=True)) / ctx.norm,)


# ---------------------------------------------------------------- nn layers


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


@primitive("conv2d")
class Conv2d:
    """Cross-correlation with zero padding via im2col."""

    @staticmethod
    def forward(ctx, x, w, b, *, stride=1, padding=0):
        B, C, H, W = x.shape
        O, Cw, kh, kw = w.shape
        if C != Cw:
            raise ValueError(f"conv2d: input has {C} channels, kernel expects {Cw}")
        Ho = (H + 2 * padding - kh) // stride + 1
        Wo = (W + 2 * padding - kw) // stride + 1
        if Ho < 1 or Wo < 1:
            raise ValueError(f"conv2d: empty output for input {H}x{W}, kernel {kh}x{kw}")
        ctx.xshape, ctx.stride, ctx.padding = x.shape, stride, padding
        ctx.w = w
        if kh == 1 and kw == 1 and padding == 0:
            xs = x[:, :, ::stride, ::stride]
            cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, C)
        else:
            xp = _pad_hw(x, padding)
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            win = win[:, :, :Ho, :Wo]
            cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
        ctx.cols, ctx.out_hw = cols, (Ho, Wo)
        out = cols @ w.reshape(O, -1).T + b
        return np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    @staticmethod
    def backward(ctx, g):
        B, C, H, W = ctx.xshape
        w = ctx.w
        O, _, kh, kw = w.shape
        Ho, Wo = ctx.out_hw
        s, p = ctx.stride, ctx.padding
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = (gm.T @ ctx.cols).reshape(w.shape)
        gb = gm.sum(axis=0)
        if s == 1 and kh == kw and p <= kh - 1 and not (kh == 1 and p == 0):
            # stride-1 input gradient is a correlation of g with the flipped, transposed kernel
            wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = Conv2d.forward(SimpleNamespace(), g, wt, np.zeros(C, dtype=g.dtype), stride=1, padding=kh - 1 - p)
            return gx, gw, gb
        gcols = gm @ w.reshape(O, -1)
        if kh == 1 and kw == 1 and p == 0:
            gx = np.zeros(ctx.xshape, dtype=g.dtype)
            gx[:, :, ::s, ::s] = gcols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
            return gx, gw, gb
        gcols = gcols.reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return np.ascontiguousarray(gx), gw, gb


@primitive("dwconv3x3")
class DWConv3x3:
    """Depth-wise 3x3 convolution, padding 1, stride 1, one kernel per channel."""

    @staticmethod
    def forward(ctx, x, k, b):
        B, C, H, W = x.shape
        if k.shape != (C, 3, 3):
            raise ValueError(f"dwconv3x3: kernel {k.shape} does not match {C} channels")
        xp = _pad_hw(x, 1)
        ctx.xp, ctx.k = xp, k
        out = np.zeros_like(x)
        for i in range(3):
            for j in range(3):
                out += xp[:, :, i : i + H, j : j + W] * k[None, :, i, j, None, None]
        return out + b[None, :, None, None]

    @staticmethod
    def backward(ctx, g):
        xp, k = ctx.xp, ctx.k
        B, C, H, W = g.shape
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k)
        for i in range(3):
            for j in range(3):
                gk[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i : i + H, j : j + W])
                gxp[:, :, i : i + H, j : j + W] += g * k[None, :, i, j, None, None]
        return np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1]), gk, g.sum(axis=(0, 2, 3))


@primitive("pointwise")
class Pointwise:
    """Channel-mixing 1x1 map: out[b,o,h,w] = sum_c x[b,c,h,w] W[c,o] + bias[o]."""

    @staticmethod
    def forward(ctx, x, w, b):
        B, C, H, W = x.shape
        if w.shape[0] != C:
            raise ValueError(f"pointwise: input has {C} channels, weight expects {w.shape[0]}")
        xm = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, C)
        ctx.xm, ctx.w, ctx.shape = xm, w, (B, H, W)
        out = xm @ w + b
        return np.ascontiguousarray(out.reshape(B, H, W, -1).transpose(0, 3, 1, 2))

    @staticmethod
    def backward(ctx, g):
        B, H, W = ctx.shape
        O = g.shape[1]
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gx = (gm @ ctx.w.T).reshape(B, H, W, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), ctx.xm.T @ gm, gm.sum(axis=0)


@primitive("max_pool2x2")
class MaxPool2x2:
    @staticmethod
    def forward(ctx, x):
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"max_pool2x2 needs even spatial dims, got {H}x{W}")
        win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
        # argmax returns the first maximal entry, i.e. row-major tie-breaking
        idx = win.argmax(axis=-1)
        ctx.idx, ctx.shape = idx, x.shape
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        B, C, H, W = ctx.shape
        gw = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, ctx.idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (np.ascontiguousarray(gx),)


def _interp_axis(n_in: int, n_out: int):
    """Source indices and weights for align_corners=False linear resampling."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, f = _interp_axis(n_in, n_out)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


@primitive("resize_bilinear")
class ResizeBilinear:
    @staticmethod
    def forward(ctx, x, *, size):
        H, W = x.shape[-2:]
        Ho, Wo = size
        ctx.hw = (H, W, Ho, Wo)
        # lerp form x0 + f*(x1 - x0) keeps constant inputs exactly constant
        i0, i1, f = _interp_axis(H, Ho)
        f = f.astype(x.dtype)[:, None]
        a, b = x[..., i0, :], x[..., i1, :]
        rows = a + f * (b - a)
        j0, j1, fw = _interp_axis(W, Wo)
        fw = fw.astype(x.dtype)
        a, b = rows[..., j0], rows[..., j1]
        return a + fw * (b - a)

    @staticmethod
    def backward(ctx, g):
        H, W, Ho, Wo = ctx.hw
        mh = _interp_matrix(H, Ho).astype(g.dtype)
        mw = _interp_matrix(W, Wo).astype(g.dtype)
        return (mh.T @ g @ mw,)


@primitive("batch_norm")
class BatchNorm:
    """Per-channel normalization over (B, H, W) with batch statistics."""

    @staticmethod
    def forward(ctx, x, gamma, beta, *, eps=1e-5):
        if x.shape[0] == 0:
            raise ValueError("batch_norm on an empty batch")
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.xhat, ctx.inv, ctx.gamma = xhat, inv, gamma
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    @staticmethod
    def backward(ctx, g):
        xhat, inv = ctx.xhat, ctx.inv
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * ctx.gamma[None, :, None, None]
        m = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        gx = inv * (gxhat - m - xhat * mx)
        return gx, gg, gb


@primitive("layer_norm")
class LayerNorm:
    """Normalization over the last axis."""

    @staticmethod
    def forward(ctx, x, gamma, beta, *, eps=1e-5):
        if x.shape[-1] == 0:
            raise ValueError("layer_norm over an empty axis")
        mean = x.mean(axis=-1, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.xhat, ctx.inv, ctx.gamma = xhat, inv, gamma
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, inv = ctx.xhat, ctx.inv
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gxhat = g * ctx.gamma
        m = gxhat.mean(axis=-1, keepdims=True)
        mx = (gxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (gxhat - m - xhat * mx), gg, gb


# ---------------------------------------------------------------- public wrappers


def add(a, b):
    return apply(Add, a, b)


def sub(a, b):
    return apply(Sub, a, b)


def mul(a, b):
    return apply(Mul, a, b)


def div(a, b):
    return apply(Div, a, b)


def neg(a):
    return apply(Neg, a)


def exp(a):
    return apply(Exp, a)


def log(a):
    return apply(Log, a)


def relu(a):
    return apply(Relu, a)


def sigmoid(a):
    return apply(Sigmoid, a)


def silu(a):
    return apply(Silu, a)


def clip(a, lo: float, hi: float):
    return apply(Clip, a, lo=lo, hi=hi)


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    return apply(Sum, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False):
    a_shape = a.shape if isinstance(a, Tensor) else np.shape(a)
    if axis is None:
        n = int(np.prod(a_shape))
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a_shape[k] for k in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    return apply(Reshape, a, shape=tuple(shape))


def transpose(a, axes):
    return apply(Transpose, a, axes=tuple(axes))


def concat(tensors, axis: int = 0):
    return apply(Concat, *tensors, axis=axis)


def matmul(a, b):
    return apply(Matmul, a, b)


def logsumexp(a, axis: int = -1, where=None):
    return apply(LogSumExp, a, axis=axis, where=where)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12):
    return apply(L2Normalize, a, axis=axis, eps=eps)


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0):
    return apply(Conv2d, x, kernel, bias, stride=stride, padding=padding)


def dwconv3x3(x, kernel, bias):
    return apply(DWConv3x3, x, kernel, bias)


def pointwise(x, weight, bias):
    return apply(Pointwise, x, weight, bias)


def max_pool2x2(x):
    return apply(MaxPool2x2, x)


def resize_bilinear(x, size: tuple[int, int]):
    return apply(ResizeBilinear, x, size=tuple(size))


def bilinear_upsample2x(x):
    H, W = x.shape[-2:]
    return resize_bilinear(x, (2 * H, 2 * W))


class RunningStats:
    """Batch-norm running mean/variance buffers (not learnable)."""

    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, x: np.ndarray) -> None:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3)) * (n / max(n - 1, 1))
        self.mean[...] = (1 - self.momentum) * self.mean + self.momentum * m
        self.var[...] = (1 - self.momentum) * self.var + self.momentum * v


def batch_norm(x, gamma, beta, running: RunningStats | None, training: bool, eps: float = 1e-5):
    """Batch norm; training mode normalizes by batch statistics and updates ``running``."""
    if training:
        if running is not None:
            running.update(x.data)
        return apply(BatchNorm, x, gamma, beta, eps=eps)
    if running is None:
        raise ValueError("eval-mode batch_norm needs running statistics")
    dt = x.data.dtype
    inv = (1.0 / np.sqrt(running.var + eps)).astype(dt)
    scale = mul(gamma, inv)
    shift = sub(beta, mul(gamma, (running.mean * inv).astype(dt)))
    return add(mul(x, reshape(scale, (1, -1, 1, 1))), reshape(shift, (1, -1, 1, 1)))


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    return apply(LayerNorm, x, gamma, beta, eps=eps)
