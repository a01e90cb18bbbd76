"""Differentiable operations on 4-D ``(N, C, H, W)`` tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DegenerateInputError
from .core import Tensor, record


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _pack(mask: np.ndarray) -> bytes:
    return np.packbits(mask.reshape(-1)).tobytes()


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``weight`` is ``(out_channels, in_channels, k, k)``.
    """
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    o, ci, k, k2 = wd.shape
    if ci != c or k != k2:
        raise ConfigurationError(f"weight {wd.shape} incompatible with input channels {c}")
    if bias is not None and bias.shape != (o,):
        raise ConfigurationError(f"bias shape {bias.shape} != ({o},)")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(f"input {h}x{w} too small for kernel {k} with padding {padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (C*k*k, N*Ho*Wo) im2col matrix, innermost axis contiguous; reused by backward
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)
    wmat = wd.reshape(o, c * k * k)
    out2 = wmat @ cols
    if bias is not None:
        out2 += bias.data[:, None]
    out = Tensor(np.ascontiguousarray(out2.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)))

    def _backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (g2 @ cols.T).reshape(wd.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, _backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(xd.repeat(2, axis=2).repeat(2, axis=3))
    n, c, h, w = xd.shape

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample_nearest2x", (x,), out, _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigurationError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def _backward(g):
        return g[:, :ca], g[:, ca:]

    return record("concat_channels", (a, b), out, _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[:, start:stop].copy())

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice_channels", (x,), out, _backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, x.data * x.data.dtype.type(slope)))
    factor = np.where(pos, 1.0, slope).astype(x.dtype)

    def _backward(g):
        return (g * factor,)

    return record("leaky_relu", (x,), out, _backward, decisions=_pack(pos))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # numerically stable for either sign
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    out = Tensor(s)

    def _backward(g):
        return (g * s * (1.0 - s),)

    return record("sigmoid", (x,), out, _backward)


def scale_shift(x: Tensor, a: float, b: float) -> Tensor:
    """``a * x + b`` with scalar ``a`` and ``b``."""
    dt = x.dtype.type
    out = Tensor(x.data * dt(a) + dt(b))

    def _backward(g):
        return (g * dt(a),)

    return record("scale_shift", (x,), out, _backward)


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = Tensor(ad + bd)
    shape_a, shape_b = np.shape(ad), np.shape(bd)

    def _unbroadcast(g, shape):
        while g.ndim > len(shape):
            g = g.sum(axis=0)
        for i, s in enumerate(shape):
            if s == 1 and g.shape[i] != 1:
                g = g.sum(axis=i, keepdims=True)
        return g

    def _backward(g):
        return _unbroadcast(g, shape_a), _unbroadcast(g, shape_b)

    return record("add", (a, b), out, _backward)


def weighted_sum(terms) -> Tensor:
    """``sum(c_i * t_i)`` over ``(coefficient, scalar tensor)`` pairs."""
    terms = list(terms)
    if not terms:
        raise ConfigurationError("weighted_sum needs at least one term")
    tensors = tuple(t for _, t in terms)
    coefs = [float(c) for c, _ in terms]
    dt = tensors[0].dtype
    total = np.zeros((), dtype=dt)
    for c, t in zip(coefs, tensors):
        total = total + dt.type(c) * t.data.astype(dt)
    out = Tensor(np.asarray(total, dtype=dt))

    def _backward(g):
        return tuple(np.asarray(g * dt.type(c), dtype=t.dtype).reshape(t.shape) for c, t in zip(coefs, tensors))

    return record("weighted_sum", tensors, out, _backward)


def l1_mean(pred: Tensor, target, mask=None) -> Tensor:
    """Mean absolute difference over the entries selected by ``mask``.

    ``target`` may be a tensor or a plain array; ``mask`` is a boolean array
    broadcastable to ``pred``. Without a mask every entry counts.
    """
    pd = pred.data
    td = _data(target).astype(pd.dtype, copy=False)
    if td.shape != pd.shape:
        raise ConfigurationError(f"l1_mean shapes differ: {pd.shape} vs {td.shape}")
    diff = pd - td
    if mask is None:
        m = None
        count = diff.size
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), pd.shape)
        count = int(m.sum())
    if count == 0:
        raise DegenerateInputError("l1_mean: mask selects no entries")
    absd = np.abs(diff)
    if m is not None:
        absd = np.where(m, absd, 0)
    out = Tensor(np.asarray(absd.sum(dtype=np.float64) / count, dtype=pd.dtype))
    sgn = np.sign(diff)
    if m is not None:
        sgn = np.where(m, sgn, 0)
    # sign pattern, including exact ties, is this op's discrete decision
    decisions = _pack(sgn > 0) + _pack(sgn < 0)

    def _backward(g):
        gp = (sgn * (g / count)).astype(pd.dtype)
        gt = -gp if isinstance(target, Tensor) else None
        return gp, gt

    inputs = (pred, target) if isinstance(target, Tensor) else (pred,)
    return record("l1_mean", inputs, out, _backward, decisions=decisions)
