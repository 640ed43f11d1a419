"""Differentiable primitives.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them is a scalar, or one of them matches the trailing dimensions of the
other (a bias or per-channel affine term).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _record, sliding_windows

__all__ = [
    "add", "sub", "mul", "neg", "matmul", "relu", "exp", "log", "softmax",
    "log_softmax", "sum", "mean", "reshape", "concat", "index", "conv2d",
    "batchnorm", "avgpool2d", "maxpool2d", "cross_entropy", "mix", "zeros",
    "PRIMITIVES",
]


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _check_broadcast(op: str, a: tuple, b: tuple) -> None:
    if a == b or int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if big[len(big) - len(small):] == small:
        return
    raise ShapeError(op, a, b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


# ----------------------------------------------------------------------------
# reductions and shape


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _record(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _record(np.asarray(x.data.mean(axis=axis)), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", *[t.shape for t in xs])
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def index(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _record(np.array(x.data[key]), (x,), bw, "index")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(ad @ bd, (a, b), bw, "matmul")


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or Tensor(0.0).dtype))


# ----------------------------------------------------------------------------
# convolution and pooling (NCHW)


def _out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """Grouped 2-d cross-correlation, ``w`` of shape (O, I/groups, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape)
    b, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError("conv2d", x.shape, w.shape)
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xd, wdat = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd

    if kh == 1 and kw == 1 and groups == 1:
        xs = xp[:, :, ::stride, ::stride][:, :, :ho, :wo] if stride > 1 else xp
        xs2 = np.ascontiguousarray(xs).reshape(b, c, ho * wo)
        w2 = wdat.reshape(o, c)
        out = np.matmul(w2, xs2).reshape(b, o, ho, wo)

        def bw(g):
            g2 = g.reshape(b, o, ho * wo)
            gw = np.tensordot(g2, xs2, axes=([0, 2], [0, 2])).reshape(wdat.shape)
            gxs = np.matmul(w2.T, g2).reshape(b, c, ho, wo)
            if stride == 1 and not padding:
                return gxs, gw
            gxp = np.zeros_like(xp)
            gxp[:, :, : ho * stride : stride, : wo * stride : stride] = gxs
            return _unpad(gxp, padding), gw

        return _record(out, (x, w), bw, "conv2d")

    win = sliding_windows(xp, kh, kw, stride, dilation, ho, wo)

    if groups == c and cg == 1 and o == c:
        kk, p = kh * kw, ho * wo
        # (c, K, b*P) layout turns the per-channel contraction into batched matmuls
        cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(c, kk, b * p)
        wk = wdat.reshape(c, 1, kk)
        out = np.matmul(wk, cols).reshape(c, b, ho, wo).transpose(1, 0, 2, 3)

        def bw(g):
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c, 1, b * p)
            gw = np.matmul(gt, cols.transpose(0, 2, 1)).reshape(wdat.shape)
            gcols = (wk.reshape(c, kk, 1) * gt).reshape(c, kh, kw, b, ho, wo)
            gxp = np.zeros((c, b) + xp.shape[2:], dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0 : r0 + stride * ho : stride, c0 : c0 + stride * wo : stride] += gcols[:, i, j]
            return np.ascontiguousarray(_unpad(gxp, padding).transpose(1, 0, 2, 3)), gw

        return _record(np.ascontiguousarray(out), (x, w), bw, "depthwise_conv2d")

    og = o // groups
    kk = cg * kh * kw
    cols = np.ascontiguousarray(win).reshape(b, groups, cg, kh, kw, ho * wo).reshape(b, groups, kk, ho * wo)
    w3 = wdat.reshape(groups, og, kk)
    out = np.matmul(w3[None], cols).reshape(b, o, ho, wo)

    def bw(g):
        g3 = g.reshape(b, groups, og, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wdat.shape)
        gcols = np.matmul(np.swapaxes(w3, 1, 2)[None], g3).reshape(b, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                gxp[:, :, r0 : r0 + stride * ho : stride, c0 : c0 + stride * wo : stride] += gcols[:, :, i, j]
        return _unpad(gxp, padding), gw

    return _record(out, (x, w), bw, "conv2d")


def _unpad(a: np.ndarray, p: int) -> np.ndarray:
    return a[:, :, p:-p, p:-p] if p else a


def avgpool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling; padded cells count toward the divisor."""
    if x.ndim != 4:
        raise ShapeError("avgpool2d", x.shape)
    b, c, h, w = x.shape
    ho = _out_size(h, kernel, stride, padding, 1)
    wo = _out_size(w, kernel, stride, padding, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_windows(xp, kernel, kernel, stride, 1, ho, wo)
    out = win.sum(axis=(2, 3)) / (kernel * kernel)
    out = out.astype(x.dtype, copy=False)

    def bw(g):
        gxp = np.zeros_like(xp)
        gs = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (_unpad(gxp, padding),)

    return _record(out, (x,), bw, "avgpool2d")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("maxpool2d", x.shape)
    b, c, h, w = x.shape
    ho = _out_size(h, kernel, stride, padding, 1)
    wo = _out_size(w, kernel, stride, padding, 1)
    xp = np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf
    ) if padding else x.data
    win = sliding_windows(xp, kernel, kernel, stride, 1, ho, wo)
    flat = win.reshape(b, c, kernel * kernel, ho, wo)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        return (_unpad(gxp, padding),)

    return _record(out, (x,), bw, "maxpool2d")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Batch-statistics normalisation over (N, H, W) with a per-channel affine."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batchnorm", x.shape, gamma.shape, beta.shape)
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data[None, :, None, None]
    out = (xhat * gm + beta.data[None, :, None, None]).astype(x.dtype, copy=False)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx_hat = g * gm
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=axes, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True))
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return _record(out, (x, gamma, beta), bw, "batchnorm")


# ----------------------------------------------------------------------------
# losses and mixing


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy against integer class labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / labels.shape[0]),)

    return _record(loss, (logits,), bw, "cross_entropy")


def mix(z: Tensor, outs: Sequence[Tensor]) -> Tensor:
    """Weighted sum ``sum_k z[..., k] * outs[k]``.

    ``z`` is either a single weight vector of length K shared by the whole
    batch, or a (B, K) matrix holding one weight vector per batch row.
    Accumulation runs in index order so a hard one-hot ``z`` reproduces the
    selected output bit for bit.
    """
    outs = list(outs)
    k = len(outs)
    if z.shape[-1] != k or z.ndim not in (1, 2):
        raise ShapeError("mix", z.shape, *[o.shape for o in outs])
    shape = outs[0].shape
    for o in outs:
        if o.shape != shape:
            raise ShapeError("mix", z.shape, *[o.shape for o in outs])
    zd = z.data.astype(outs[0].dtype, copy=False)
    per_row = z.ndim == 2
    if per_row and zd.shape[0] != shape[0]:
        raise ShapeError("mix", z.shape, shape)
    bshape = (shape[0],) + (1,) * (len(shape) - 1)

    def weight(i):
        return zd[:, i].reshape(bshape) if per_row else zd[i]

    acc = np.zeros(shape, dtype=outs[0].dtype)
    for i, o in enumerate(outs):
        acc = acc + weight(i) * o.data

    def bw(g):
        if per_row:
            gz = np.stack([(g * o.data).reshape(shape[0], -1).sum(axis=1) for o in outs], axis=1)
        else:
            gz = np.array([np.vdot(g, o.data) for o in outs], dtype=z.dtype)
        return (gz,) + tuple(g * weight(i) for i in range(k))

    return _record(acc, (z, *outs), bw, "mix")


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "matmul": matmul,
    "relu": relu, "exp": exp, "log": log, "softmax": softmax,
    "log_softmax": log_softmax, "sum": sum, "mean": mean, "reshape": reshape,
    "concat": concat, "index": index, "conv2d": conv2d,
    "depthwise_conv2d": lambda x, w, **kw: conv2d(x, w, groups=x.shape[1], **kw),
    "batchnorm": batchnorm, "avgpool2d": avgpool2d, "maxpool2d": maxpool2d,
    "cross_entropy": cross_entropy, "mix": mix,
}
