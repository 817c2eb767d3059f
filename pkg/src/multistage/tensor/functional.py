"""Neural-network ops on :class:`Tensor`.

Layouts are NCHW for images and (N, T, C) for token sequences.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Tensor, _unbroadcast, _wrap


# -- activations / normalizers -----------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return x.relu()


def gelu(x: Tensor) -> Tensor:
    return x.gelu()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor.make(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc / (var + eps).sqrt()
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def batch_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None, mean=None, var=None,
               eps: float = 1e-5):
    """Normalize over every axis except channels (axis 1).

    When ``mean``/``var`` are None the batch statistics are used and returned
    as numpy arrays alongside the output; otherwise the given statistics are
    treated as constants.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if mean is None:
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        v = (xc * xc).mean(axis=axes, keepdims=True)
        y = xc / (v + eps).sqrt()
        stats = (mu.data.reshape(-1).copy(), v.data.reshape(-1).copy())
    else:
        m = np.asarray(mean, dtype=x.dtype).reshape(bshape)
        s = np.sqrt(np.asarray(var, dtype=x.dtype).reshape(bshape) + eps)
        y = (x - m) / s
        stats = None
    if weight is not None:
        y = y * weight.reshape(bshape)
    if bias is not None:
        y = y + bias.reshape(bshape)
    return y, stats


def sync_batchnorm(groups: Sequence[Tensor], weight: Tensor | None, bias: Tensor | None,
                   eps: float = 1e-5):
    """Normalize every group with mean/variance pooled over the union of groups.

    Statistics are reduced from per-group partial sums in list order, the way
    an all-reduce across devices would. Returns (outputs, (mean, var)).
    """
    groups = [g for g in groups]
    if not groups or sum(g.shape[0] for g in groups) == 0:
        raise ValueError("sync_batchnorm over an empty union")
    chans = {g.shape[1] for g in groups}
    if len(chans) != 1:
        raise ValueError(f"groups disagree on channel count: {sorted(chans)}")
    axes = (0,) + tuple(range(2, groups[0].ndim))
    bshape = (1, -1) + (1,) * (groups[0].ndim - 2)
    count = sum(g.size // g.shape[1] for g in groups)
    total = None
    for g in groups:
        part = g.sum(axis=axes, keepdims=True)
        total = part if total is None else total + part
    mu = total * (1.0 / count)
    sq = None
    for g in groups:
        d = g - mu
        part = (d * d).sum(axis=axes, keepdims=True)
        sq = part if sq is None else sq + part
    var = sq * (1.0 / count)
    inv = 1.0 / (var + eps).sqrt()
    outs = []
    for g in groups:
        y = (g - mu) * inv
        if weight is not None:
            y = y * weight.reshape(bshape)
        if bias is not None:
            y = y + bias.reshape(bshape)
        outs.append(y)
    return outs, (mu.data.reshape(-1).copy(), var.data.reshape(-1).copy())


# -- linear / conv -------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = x @ weight.T
    return y + bias if bias is not None else y


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation. ``groups`` must be 1 or equal the channel count."""
    xd, wd = x.data, weight.data
    n, c, h, w = xd.shape
    o, cg, kh, kw = wd.shape
    if groups == 1 and cg != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cg}")
    if groups != 1 and not (groups == c == o and cg == 1):
        raise ValueError("conv2d: only dense or depthwise grouping is supported")
    s, p = stride, padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = _pad(xd, p)

    def window(arr, i, j):
        return arr[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    if groups == 1:
        if kh == kw == 1 and p == 0:
            cols = window(xp, 0, 0).reshape(n, c, ho * wo)
        else:
            cols = np.empty((n, c, kh, kw, ho, wo), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    cols[:, :, i, j] = window(xp, i, j)
            cols = cols.reshape(n, c * kh * kw, ho * wo)
        wmat = wd.reshape(o, -1)
        out = (wmat @ cols).reshape(n, o, ho, wo)

        def bw(g):
            gm = g.reshape(n, o, ho * wo)
            gw = np.einsum("nop,nkp->ok", gm, cols, optimize=True).reshape(wd.shape)
            gx = None
            if x.requires_grad:
                gcols = (wmat.T @ gm).reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        window(gxp, i, j)[...] += gcols[:, :, i, j]
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            grads = [gx, gw]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return tuple(grads)
    else:
        out = np.zeros((n, c, ho, wo), dtype=np.result_type(xd, wd))
        for i in range(kh):
            for j in range(kw):
                out += window(xp, i, j) * wd[:, 0, i, j][None, :, None, None]

        def bw(g):
            gw = np.zeros_like(wd)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * window(xp, i, j)).sum(axis=(0, 2, 3))
                    window(gxp, i, j)[...] += g * wd[:, 0, i, j][None, :, None, None]
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            grads = [gx, gw]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    return Tensor.make(out.astype(np.result_type(xd, wd), copy=False), parents, bw, "conv2d")


# -- pooling / resampling ----------------------------------------------------------

def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def max_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"max_pool2d: {h}x{w} not divisible by {k}")
    y = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    return y.reshape(n, c, h // k, w // k, k * k).max(axis=-1)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor.make(y, (x,), bw, "upsample_nearest")


def resize_to(x: Tensor, size: int) -> Tensor:
    """Strided average pooling down, nearest-neighbour up."""
    h = x.shape[2]
    if size == h:
        return x
    if size < h:
        return avg_pool2d(x, h // size)
    return upsample_nearest(x, size // h)


def bilinear_sample(x: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map at continuous pixel-index coordinates.

    Integer coordinates hit pixel centres; coordinates are clamped to the map.
    Returns shape (C,) + ys.shape. No gradient flows to the coordinates.
    """
    xd = x.data
    c, h, w = xd.shape
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ly, lx = ys - y0, xs - x0
    hy, hx = 1.0 - ly, 1.0 - lx
    corners = [(y0, x0, hy * hx), (y0, x1, hy * lx), (y1, x0, ly * hx), (y1, x1, ly * lx)]
    out = np.zeros((c,) + ys.shape, dtype=np.float64)
    for yy, xx, wgt in corners:
        out += xd[:, yy, xx] * wgt
    out = out.astype(xd.dtype)

    def bw(g):
        gx = np.zeros_like(xd)
        for yy, xx, wgt in corners:
            contrib = (g * wgt).astype(xd.dtype)
            np.add.at(gx, (slice(None), yy, xx), contrib)
        return (gx,)

    return Tensor.make(out, (x,), bw, "bilinear_sample")


# -- combination ---------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for i in range(len(tensors)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return Tensor.make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    bounds = np.cumsum([0] + list(sizes))
    out = []
    for i in range(len(sizes)):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
        out.append(x[tuple(sl)])
    return out


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    mask = np.asarray(mask, dtype=bool)
    return Tensor.make(np.where(mask, a.data, b.data), (a, b),
                       lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                                  _unbroadcast(np.where(mask, 0, g), b.shape)), "where")


# -- similarity / losses ---------------------------------------------------------

def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return (normalize(a, axis, eps) * normalize(b, axis, eps)).sum(axis=axis)


def cross_entropy(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of (N, K) logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[0] == 0:
        raise ValueError("cross_entropy on an empty batch")
    lp = log_softmax(logits, axis=-1)
    picked = lp[np.arange(targets.shape[0]), targets]
    if weights is None:
        return -picked.mean()
    wts = np.asarray(weights, dtype=logits.dtype)
    return -(picked * wts).sum() / float(wts.sum())


def mse(pred: Tensor, target) -> Tensor:
    d = pred - _wrap(target)
    return (d * d).mean()


def dropout_free_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    d = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d))
    return softmax(scores, axis=-1) @ v
