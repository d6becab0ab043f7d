"""Differentiable operations on NCHW tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _shape_error(op, a, b):
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# -- pointwise ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._make(np.log(d), (x,), lambda g: (g / d,), "log")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return Tensor._make(e, (x,), lambda g: (g * e,), "exp")


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input is inside ``[lo, hi]``."""
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return Tensor._make(np.clip(d, lo, hi), (x,), lambda g: (g * inside,), "clip")


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    d = x.data
    a = np.abs(d)
    small = a < beta
    out = np.where(small, 0.5 * d * d / beta, a - 0.5 * beta)
    return Tensor._make(out, (x,), lambda g: (g * np.where(small, d / beta, np.sign(d)),), "smooth_l1")


def gradient_reversal(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-scale``."""
    return Tensor._make(x.data.copy(), (x,), lambda g: (-scale * g,), "grl")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- dense layers --------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    out = x @ weight.transpose()
    return out + bias if bias is not None else out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    xd = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
    wmat = weight.data[:, :, 0, 0]
    out = np.tensordot(wmat, xd, axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None] if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxd = np.tensordot(wmat, g, axes=([0], [1])).transpose(1, 0, 2, 3)
            if stride > 1:
                gx = np.zeros(x.shape)
                gx[:, :, ::stride, ::stride] = gxd
            else:
                gx = np.ascontiguousarray(gxd)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, back, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: (N, C, H, W); weight: (O, C, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv2d", x.shape, weight.shape)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if kh == 1 and kw == 1 and padding == 0:
        return _conv1x1(x, weight, bias, stride)
    xp = _pad(x.data, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise _shape_error("conv2d", x.shape, weight.shape)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    pshape = xp.shape

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((gm @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros(pshape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, back, "conv2d")


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Non-overlapping-or-strided max pool, ties routed to the first index."""
    stride = stride or kernel
    n, c, h, w = x.shape
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros(x.shape)
        di, dj = np.divmod(arg, kernel)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn_, cc, rows, cols), g)
        return (gx,)

    return Tensor._make(out, (x,), back, "max_pool2d")


# -- channel / spatial ops -----------------------------------------------------


def concat_channels(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise _shape_error("concat_channels", ref, t.shape)
    sizes = [t.shape[1] for t in tensors]
    edges = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(tensors)))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), back, "concat")


def split_channels(x: Tensor, sizes) -> list[Tensor]:
    edges = np.cumsum([0] + list(sizes))
    if edges[-1] != x.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    return [x[:, edges[i] : edges[i + 1]] for i in range(len(sizes))]


def channel_max(x: Tensor) -> Tensor:
    """Max over axis 1; ties go to the lowest channel index."""
    arg = x.data.argmax(axis=1)
    out = np.take_along_axis(x.data, arg[:, None], axis=1)[:, 0]

    def back(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, arg[:, None], g[:, None], axis=1)
        return (gx,)

    return Tensor._make(out, (x,), back, "channel_max")


def _bins(n: int, m: int):
    """Adaptive-pool bin edges: bin i covers [floor(i*n/m), ceil((i+1)*n/m))."""
    return [((i * n) // m, -((-(i + 1) * n) // m)) for i in range(m)]


def adaptive_mean_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ValueError(f"adaptive pool size ({out_h}, {out_w}) invalid for grid ({h}, {w})")
    rb, cb = _bins(h, out_h), _bins(w, out_w)
    if h % out_h == 0 and w % out_w == 0:
        sh, sw = h // out_h, w // out_w
        out = x.data.reshape(n, c, out_h, sh, out_w, sw).mean(axis=(3, 5))

        def back(g):
            return (np.repeat(np.repeat(g, sh, axis=2), sw, axis=3) / (sh * sw),)

        return Tensor._make(out, (x,), back, "adaptive_mean_pool")
    out = np.empty((n, c, out_h, out_w))
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def back(g):
        gx = np.zeros(x.shape)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i, j][:, :, None, None] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return Tensor._make(out, (x,), back, "adaptive_mean_pool")


def adaptive_max_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive max pool; each bin's gradient goes to its first row-major argmax."""
    n, c, h, w = x.shape
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ValueError(f"adaptive pool size ({out_h}, {out_w}) invalid for grid ({h}, {w})")
    rb, cb = _bins(h, out_h), _bins(w, out_w)
    out = np.empty((n, c, out_h, out_w))
    where = []
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            block = x.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            a = block.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(block, a[..., None], axis=-1)[..., 0]
            where.append((i, j, r0 + a // (c1 - c0), c0 + a % (c1 - c0)))

    def back(g):
        gx = np.zeros(x.shape)
        nn_ = np.arange(n)[:, None]
        cc = np.arange(c)[None, :]
        for i, j, rr, ccol in where:
            np.add.at(gx, (nn_, cc, rr, ccol), g[:, :, i, j])
        return (gx,)

    return Tensor._make(out, (x,), back, "adaptive_max_pool")


def global_mean_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3))
