"""Fused neural-network kernels with hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _unbroadcast, as_tensor, make

_GELU_C = np.sqrt(2.0 / np.pi)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; leading axes are flattened for one GEMM."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear shape mismatch: {xd.shape} @ {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, wd.shape[1])
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return make("linear", out, parents, bw)


def rowwise_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Linear map whose per-row result does not depend on the batch size.

    BLAS may pick different blocking for different row counts, which changes
    rounding. Conditioning projections must be bit-reproducible row by row,
    so they reduce with a fixed-order sum instead.
    """
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ValueError(f"rowwise_linear shape mismatch: {xd.shape} @ {wd.shape}")
    out = np.empty((xd.shape[0], wd.shape[1]))
    for i in range(xd.shape[0]):
        out[i] = np.add.reduce(xd[i][:, None] * wd, axis=0)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return make("rowwise_linear", out, parents, bw)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalise to zero mean and unit variance along ``axis`` (no affine)."""
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = xd.shape[axis]

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return make("layer_norm", y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make("softmax", p, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    s[~pos] = ez / (1.0 + ez)
    return make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-np.clip(xd, -700, 700)))
    out = xd * s
    return make("silu", out, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        d = th * th
        np.subtract(1.0, d, out=d)
        d *= xd
        d *= x2 * (3 * 0.044715 * _GELU_C) + _GELU_C
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return make("gelu", out, (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    td = table.data

    def bw(g):
        full = np.zeros_like(td)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (full,)

    return make("embedding", td[ids], (table,), bw)


def mse(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        gd = (2.0 / n) * g * diff
        return (
            _unbroadcast(gd, a.shape) if a.requires_grad else None,
            _unbroadcast(-gd, b.shape) if b.requires_grad else None,
        )

    return make("mse", np.asarray((diff * diff).mean()), (a, b), bw)


def pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 2D convolution on channel-last grids.

    ``x`` is ``[B, S, S, Cin]`` and ``w`` is ``[k, k, Cin, Cout]`` with odd
    ``k``. Output side is ``ceil(S / stride)``.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[3] != wd.shape[2]:
        raise ValueError(f"conv2d shape mismatch: {xd.shape} * {wd.shape}")
    k = wd.shape[0]
    if k % 2 != 1:
        raise ValueError("conv2d kernel side must be odd")
    p = k // 2
    bsz, sh, sw, cin = xd.shape
    cout = wd.shape[3]
    oh = (sh + stride - 1) // stride
    ow = (sw + stride - 1) // stride
    xp = pad_hw(xd, p)
    cols = np.empty((bsz, oh, ow, k, k, cin))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    cols2 = cols.reshape(-1, k * k * cin)
    w2 = wd.reshape(k * k * cin, cout)
    out = cols2 @ w2
    if b is not None:
        out = out + b.data
    out = out.reshape(bsz, oh, ow, cout)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(bsz, oh, ow, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p : p + sh, p : p + sw, :]
        gw = (cols2.T @ g2).reshape(wd.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return make("conv2d", out, parents, bw)


def bilinear_matrix(side: int, factor: int = 2) -> np.ndarray:
    """Token-space matrix for bilinear upsampling of a ``side x side`` grid.

    Half-pixel centres with edge clamping. Returns ``[(f*side)^2, side^2]``.
    """
    n_out = side * factor
    a = np.zeros((n_out, side))
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo = min(max(i0, 0), side - 1)
        hi = min(max(i0 + 1, 0), side - 1)
        a[o, lo] += 1.0 - frac
        a[o, hi] += frac
    return np.kron(a, a)
