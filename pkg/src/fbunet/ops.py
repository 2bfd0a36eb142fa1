"""Differentiable operations on ``(n, c, h, w)`` tensors.

Convolutions use fixed geometry: 3x3 kernels with zero padding 1 (spatial
size preserved), 2x2 stride-2 max pooling and 2x2 stride-2 transposed
convolution.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, make_node
from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# Piecewise-linear ops append their branch pattern here while a recorder is
# active, so finite-difference checks can spot perturbations that cross a kink.
_kink_log = None


@contextlib.contextmanager
def record_kinks():
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _check4(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D tensor, got shape {x.shape}")


def _require_nonempty(x: Tensor, op: str):
    if 0 in x.shape:
        raise ShapeError(f"{op}: zero-sized dimension in shape {x.shape}")


def _im2col3(xd):
    """(n, c, h, w) -> (c*9, n*h*w) patch matrix for a same-padded 3x3 kernel."""
    n, c, h, w = xd.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=xd.dtype)
    xp[:, :, 1:-1, 1:-1] = xd.transpose(1, 0, 2, 3)
    cols = np.empty((c, 3, 3, n, h, w), dtype=xd.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * 9, n * h * w)


def _col2im3(dcols, shape):
    n, c, h, w = shape
    dcols = dcols.reshape(c, 3, 3, n, h, w)
    dxp = np.zeros((c, n, h + 2, w + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
    return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero padding 1; output keeps the input size."""
    _check4(x, "conv2d")
    _require_nonempty(x, "conv2d")
    n, cin, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: weight must be (cout, cin, 3, 3), got {weight.shape}")
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"conv2d: weight expects {weight.shape[1]} input channels, got {cin}")
    if cout == 0:
        raise ShapeError("conv2d: zero output channels")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    cols = _im2col3(x.data)
    w2 = weight.data.reshape(cout, cin * 9)
    out = (w2 @ cols).reshape(cout, n, h, w).transpose(1, 0, 2, 3)
    # C order keeps downstream reductions independent of how a tensor was made
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * h * w)
        gx = _col2im3(w2.T @ g2, x.shape) if x.requires_grad else None
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 stride-2 transposed convolution; doubles both spatial dims.

    ``weight`` has shape ``(cin, cout, 2, 2)``; each input pixel scatters a
    ``cout x 2 x 2`` patch into its own non-overlapping output window.
    """
    _check4(x, "transposed_conv2d")
    _require_nonempty(x, "transposed_conv2d")
    n, cin, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"transposed_conv2d: weight must be (cin, cout, 2, 2), got {weight.shape}")
    if weight.shape[0] != cin:
        raise ShapeError(f"transposed_conv2d: weight expects {weight.shape[0]} input channels, got {cin}")
    cout = weight.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({cout},)")

    x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    w2 = weight.data.reshape(cin, cout * 4)
    y = (x2 @ w2).reshape(n, h, w, cout, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g2 = (g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)
              .reshape(n * h * w, cout * 4))
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((g2 @ w2.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        gw = (x2.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling. Ties send the gradient to the row-major first maximum."""
    _check4(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if _kink_log is not None:
        _kink_log.append(idx.copy())

    def backward(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_node(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_node(out, (x,), backward)


def _stable_sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return make_node(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1 - t * t),)

    return make_node(t, (x,), backward)


_POINTWISE = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def pointwise(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return fn(x)


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over axis 1 at every pixel."""
    _check4(x, "channel_softmax")
    if x.shape[1] < 2:
        raise ShapeError("channel_softmax: needs at least 2 channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (x,), backward)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "channel_concat")
    _check4(b, "channel_concat")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"channel_concat: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_node(out, (a, b), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``[start, stop)`` of ``x``."""
    _check4(x, "channel_slice")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel_slice: [{start}, {stop}) out of range for {c} channels")
    out = x.data[:, start:stop]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_node(out, (x,), backward)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "hadamard":
        return hadamard(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, k: float) -> Tensor:
    k = x.dtype.type(k)
    return make_node(x.data * k, (x,), lambda g: (g * k,))


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a ``(1, 1, 1, 1)`` tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return make_node(out, (x,), lambda g: (np.full_like(x.data, g.reshape(())),))


@dataclass
class RunningStats:
    """Per-channel running mean and (unbiased) variance for batch norm."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self):
        return RunningStats(self.mean.copy(), self.var.copy())


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
              training: bool, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over ``(n, h, w)``.

    Training mode normalizes with batch statistics (biased variance) and folds
    them into ``stats`` as ``stats = 0.9 * stats + 0.1 * batch`` (unbiased
    variance). Inference mode uses ``stats``.
    """
    _check4(x, "batchnorm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must be ({c},)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm: training mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv[None, :, None, None]
        if update_stats:
            mom = stats.mean.dtype.type(BN_MOMENTUM)
            stats.mean[...] = mom * stats.mean + (1 - mom) * mean.astype(stats.mean.dtype)
            stats.var[...] = mom * stats.var + (1 - mom) * (var * (m / (m - 1))).astype(stats.var.dtype)

        def backward(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                dxhat_scale = (gamma.data * inv)[None, :, None, None]
                gx = dxhat_scale * (g - (gb / m)[None, :, None, None]
                                    - xhat * (gg / m)[None, :, None, None])
            return gx, gg, gb
    else:
        inv = (1.0 / np.sqrt(stats.var + BN_EPS)).astype(xd.dtype)
        xhat = (xd - stats.mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            gx = g * (gamma.data * inv)[None, :, None, None] if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = gd * xhat + beta.data[None, :, None, None]
    return make_node(out, (x, gamma, beta), backward)
