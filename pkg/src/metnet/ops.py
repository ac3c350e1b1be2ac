"""Differentiable primitives over :class:`~metnet.tensor.Tensor`.

Layout is channels-last throughout: images are ``[N, H, W, C]`` and conv
kernels ``[kh, kw, Cin, Cout]``.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_node


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data / b.data, (a, b), _bw, "div")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return make_node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), _bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each feature vector (last axis) to zero mean, unit variance."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain/bias must be ({x.shape[-1]},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return make_node(out, (x, gain, bias), _bw, "layer_norm")


# --- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def _bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(x.data[index], (x,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(idx)])
        return out

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw, "concat")


def split(x: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    n = x.shape[axis]
    if n % sections:
        raise ShapeError(f"split: axis size {n} not divisible into {sections}")
    step = n // sections
    axis = axis % x.ndim
    parts = []
    for k in range(sections):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(k * step, (k + 1) * step)
        parts.append(getitem(x, tuple(idx)))
    return parts


# --- reductions ------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), _bw, "matmul")


def dense(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map along the last axis: ``x @ weights + bias``."""
    d_in, d_out = weights.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"dense: input trailing dim {x.shape[-1]} != weights Din {d_in}")
    if bias is not None and bias.shape != (d_out,):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({d_out},)")
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weights.data
    if bias is not None:
        out = out + bias.data
    lead = x.shape[:-1]

    def _bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weights.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weights.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weights) if bias is None else (x, weights, bias)
    return make_node(out.reshape(lead + (d_out,)), parents, _bw, "dense")


# --- convolution / pooling -------------------------------------------------

def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = builtins.max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(
    input: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """2-D cross-correlation, NHWC input and ``[kh, kw, Cin, Cout]`` kernel."""
    if input.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {input.shape} and {kernel.shape}")
    n, h, w, cin = input.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: same padding needs odd kernel, got {kh}x{kw}")
        ph, pw = _same_pads(h, kh, stride), _same_pads(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
        ph, pw = (0, 0), (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = input.data
    if ph != (0, 0) or pw != (0, 0):
        xp = np.pad(xp, ((0, 0), ph, pw, (0, 0)))
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    if kh == 1 and kw == 1:
        cols = xp[:, : stride * ho : stride, : stride * wo : stride, :]
    else:
        cols = np.concatenate(
            [
                xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
                for i in range(kh)
                for j in range(kw)
            ],
            axis=-1,
        )
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols2 @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout)

    def _bw(g):
        g2 = g.reshape(-1, cout)
        gk = (cols2.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if input.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh * kw, cin)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i * kw + j, :]
            gx = dxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w, :]
        if bias is None:
            return gx, gk
        return gx, gk, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (input, kernel) if bias is None else (input, kernel, bias)
    return make_node(out, parents, _bw, "conv2d")


def max_pool2d(input: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over ``window x window`` tiles. Gradient goes to the first maximum in row-major order."""
    n, h, w, c = input.shape
    if (h - window) % stride or (w - window) % stride or h < window or w < window:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} do not tile with window {window}, stride {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    stacked = np.stack(
        [
            input.data[:, a : a + stride * ho : stride, b : b + stride * wo : stride, :]
            for a in range(window)
            for b in range(window)
        ],
        axis=-1,
    )
    arg = stacked.argmax(axis=-1)
    out = np.take_along_axis(stacked, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gx = np.zeros_like(input.data)
        for k in range(window * window):
            a, b = divmod(k, window)
            gx[:, a : a + stride * ho : stride, b : b + stride * wo : stride, :] += g * (arg == k)
        return (gx,)

    return make_node(out, (input,), _bw, "max_pool2d")


# --- loss ------------------------------------------------------------------

def masked_cross_entropy(logits: Tensor, target_bins: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``target_bins`` over pixels where ``mask`` is 1."""
    target_bins = np.asarray(target_bins)
    mask = np.asarray(mask, dtype=logits.dtype)
    k = logits.shape[-1]
    if target_bins.shape != logits.shape[:-1] or mask.shape != logits.shape[:-1]:
        raise ShapeError(
            f"masked_cross_entropy: logits {logits.shape}, targets {target_bins.shape}, mask {mask.shape}"
        )
    if target_bins.size and (target_bins.min() < 0 or target_bins.max() >= k):
        raise ValueError(f"target bins must lie in [0, {k})")
    total = float(mask.sum())
    if total <= 0:
        raise ValueError("masked_cross_entropy: mask has no nonzero entries")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(z, target_bins[..., None], axis=-1)[..., 0]
    nll = np.log(s[..., 0]) - picked
    loss = np.asarray((nll * mask).sum() / total, dtype=logits.dtype)

    def _bw(g):
        p = e / s
        np.put_along_axis(p, target_bins[..., None], np.take_along_axis(p, target_bins[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (mask / total)[..., None] * g,)

    return make_node(loss, (logits,), _bw, "masked_cross_entropy")
