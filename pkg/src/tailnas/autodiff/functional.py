"""Differentiable primitives. Each records one backward rule on the tape.

Every primitive validates shapes up front and raises ShapeError naming the
offending shapes. All forward/backward math is float64 numpy; conv2d
delegates its unfold/fold loops to tailnas.kernels.
"""

from __future__ import annotations

import numpy as np

from tailnas import kernels
from tailnas.autodiff.tensor import Tensor, accumulate, record
from tailnas.errors import ShapeError, UnknownPrimitiveError

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _out(data, *inputs):
    t = Tensor(data)
    t.requires_grad = any(x.requires_grad for x in inputs)
    return t


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    y = _out(a.data + b.data, a, b)

    def bwd(gy):
        accumulate(a, gy)
        accumulate(b, gy)

    record(y, bwd)
    return y


def broadcast_add(a, b):
    """a + b with b broadcast against a (bias-style); gradient of b sums out."""
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"broadcast_add cannot combine {a.shape} and {b.shape}") from e
    if data.shape != a.shape:
        raise ShapeError(f"broadcast_add: {b.shape} does not broadcast into {a.shape}")
    y = _out(data, a, b)

    def bwd(gy):
        accumulate(a, gy)
        if b.requires_grad:
            gb = gy
            extra = gb.ndim - b.data.ndim
            if extra:
                gb = gb.sum(axis=tuple(range(extra)))
            keep = tuple(i for i, s in enumerate(b.shape) if s == 1 and gb.shape[i] != 1)
            if keep:
                gb = gb.sum(axis=keep, keepdims=True)
            accumulate(b, gb)

    record(y, bwd)
    return y


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"elementwise multiply needs equal shapes, got {a.shape} and {b.shape}")
    y = _out(a.data * b.data, a, b)

    def bwd(gy):
        accumulate(a, gy * b.data)
        accumulate(b, gy * a.data)

    record(y, bwd)
    return y


def scalar_mul(x, s):
    """x * s for python-float s or a size-1 Tensor (grad flows to both)."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scalar_mul needs a size-1 scalar, got shape {s.shape}")
        y = _out(x.data * float(s.data), x, s)

        def bwd(gy):
            accumulate(x, gy * float(s.data))
            if s.requires_grad:
                accumulate(s, np.sum(gy * x.data).reshape(s.shape))

        record(y, bwd)
        return y
    c = float(s)
    y = _out(x.data * c, x)

    def bwd_const(gy):
        accumulate(x, gy * c)

    record(y, bwd_const)
    return y


def weighted_sum(xs, w):
    """sum_i w[i] * xs[i] (the softmax-mixed operation); w is a 1-D Tensor."""
    if len(xs) != w.size:
        raise ShapeError(f"weighted_sum got {len(xs)} tensors but {w.size} weights")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ShapeError(f"weighted_sum operands disagree: {shape} vs {x.shape}")
    wv = w.data.reshape(-1)
    data = np.zeros(shape)
    for wi, x in zip(wv, xs):
        data += wi * x.data
    y = Tensor(data)
    y.requires_grad = w.requires_grad or any(x.requires_grad for x in xs)

    def bwd(gy):
        if w.requires_grad:
            gw = np.array([np.sum(gy * x.data) for x in xs])
            accumulate(w, gw.reshape(w.shape))
        for wi, x in zip(wv, xs):
            if x.requires_grad:
                accumulate(x, gy * wi)

    record(y, bwd)
    return y


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)x(k,n), got {a.shape} and {b.shape}")
    y = _out(a.data @ b.data, a, b)

    def bwd(gy):
        if a.requires_grad:
            accumulate(a, gy @ b.data.T)
        if b.requires_grad:
            accumulate(b, a.data.T @ gy)

    record(y, bwd)
    return y


def relu(x):
    y = _out(np.maximum(x.data, 0.0), x)

    def bwd(gy):
        accumulate(x, gy * (x.data > 0))

    record(y, bwd)
    return y


def sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = _out(s, x)

    def bwd(gy):
        accumulate(x, gy * s * (1.0 - s))

    record(y, bwd)
    return y


def gelu(x):
    """tanh-approximation GELU."""
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    y = _out(0.5 * v * (1.0 + t), x)

    def bwd(gy):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * v**2)
        accumulate(x, gy * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# reductions, softmax
# ---------------------------------------------------------------------------


def sum_(x):
    y = _out(np.asarray(x.data.sum()), x)

    def bwd(gy):
        accumulate(x, np.broadcast_to(gy, x.shape))

    record(y, bwd)
    return y


def mean_(x):
    n = x.size
    y = _out(np.asarray(x.data.mean()), x)

    def bwd(gy):
        accumulate(x, np.broadcast_to(gy / n, x.shape))

    record(y, bwd)
    return y


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    y = _out(p, x)

    def bwd(gy):
        dot = (gy * p).sum(axis=axis, keepdims=True)
        accumulate(x, p * (gy - dot))

    record(y, bwd)
    return y


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse
    y = _out(ls, x)

    def bwd(gy):
        accumulate(x, gy - np.exp(ls) * gy.sum(axis=axis, keepdims=True))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------


def concat(xs, axis=1):
    if not xs:
        raise ShapeError("concat of zero tensors")
    sizes = [x.shape[axis] for x in xs]
    y = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    y.requires_grad = any(x.requires_grad for x in xs)
    offsets = np.cumsum([0] + sizes)

    def bwd(gy):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                idx = [slice(None)] * gy.ndim
                idx[axis] = slice(lo, hi)
                accumulate(x, gy[tuple(idx)])

    record(y, bwd)
    return y


def split(x, sizes, axis=1):
    """Split into len(sizes) tensors along `axis`; inverse of concat, bit-exact."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis {axis} of {x.shape}")
    outs = []
    lo = 0
    for sz in sizes:
        hi = lo + sz
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, hi)
        idx = tuple(idx)
        piece = _out(x.data[idx].copy(), x)

        def bwd(gy, idx=idx):
            if x.requires_grad:
                g = np.zeros_like(x.data)
                g[idx] = gy
                accumulate(x, g)

        record(piece, bwd)
        outs.append(piece)
        lo = hi
    return tuple(outs)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x, w, stride=1, padding=0, dilation=1, groups=1):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wid = x.shape
    cout, cg, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(
            f"conv2d groups={groups} must divide channels: input {x.shape}, kernel {w.shape}"
        )
    if cg != cin // groups:
        raise ShapeError(
            f"conv2d kernel {w.shape} expects {cg * groups} input channels, input has shape {x.shape}"
        )
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    if h + 2 * padding < span_h or wid + 2 * padding < span_w:
        raise ShapeError(f"conv2d kernel {w.shape} exceeds padded input {x.shape} (padding={padding})")
    y = _out(kernels.conv2d_forward(x.data, w.data, stride, padding, dilation, groups), x, w)

    def bwd(gy):
        gx, gw = kernels.conv2d_backward(
            gy, x.data, w.data, stride, padding, dilation, groups,
            need_gx=x.requires_grad, need_gw=w.requires_grad,
        )
        if gx is not None:
            accumulate(x, gx)
        if gw is not None:
            accumulate(w, gw)

    record(y, bwd)
    return y


def _pool_windows(data, kernel, stride, padding, fill):
    n, c, h, w = data.shape
    if padding:
        xp = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=fill)
    else:
        xp = data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return xp.shape, win  # win: (N, C, ho, wo, k, k)


def max_pool2d(x, kernel=3, stride=1, padding=1):
    (_, _, hp, wp), win = _pool_windows(x.data, kernel, stride, padding, -np.inf)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)  # first max wins: deterministic subgradient
    y = _out(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], x)

    def bwd(gy):
        if not x.requires_grad:
            return
        gxp = np.zeros((n, c, hp, wp))
        for p in range(kernel * kernel):
            i, j = divmod(p, kernel)
            sel = (idx == p) * gy
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += sel
        h, w = x.shape[2], x.shape[3]
        accumulate(x, gxp[:, :, padding : padding + h, padding : padding + w])

    record(y, bwd)
    return y


def avg_pool2d(x, kernel=3, stride=1, padding=1):
    """Average pooling whose divisor counts only in-bounds cells."""
    (_, _, hp, wp), win = _pool_windows(x.data, kernel, stride, padding, 0.0)
    n, c, ho, wo = win.shape[:4]
    h, w = x.shape[2], x.shape[3]
    ones = np.ones((1, 1, h, w))
    _, cwin = _pool_windows(ones, kernel, stride, padding, 0.0)
    count = cwin.sum(axis=(-2, -1))  # (1, 1, ho, wo)
    y = _out(win.sum(axis=(-2, -1)) / count, x)

    def bwd(gy):
        if not x.requires_grad:
            return
        gxp = np.zeros((n, c, hp, wp))
        share = gy / count
        for p in range(kernel * kernel):
            i, j = divmod(p, kernel)
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        accumulate(x, gxp[:, :, padding : padding + h, padding : padding + w])

    record(y, bwd)
    return y


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool needs (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    y = _out(x.data.mean(axis=(2, 3)), x)

    def bwd(gy):
        accumulate(x, np.broadcast_to(gy[:, :, None, None] / (h * w), x.shape))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _affine_shape(x, c):
    if x.ndim == 4:
        return (1, c, 1, 1)
    if x.ndim == 2:
        return (1, c)
    raise ShapeError(f"normalization expects 2-D or 4-D input, got {x.shape}")


def batchnorm(x, gamma, beta, running_mean=None, running_var=None, training=True,
              momentum=0.1, eps=1e-5, update_running=True):
    """Per-channel batch normalization with optional running statistics.

    running_mean/running_var are plain float64 arrays updated in place
    (torch convention: biased variance normalizes the batch, unbiased
    feeds the running estimate).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    ash = _affine_shape(x, c)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    g = gamma.data.reshape(ash)
    b = beta.data.reshape(ash)

    if training:
        m = x.size // c
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = np.mean(centered * centered, axis=axes, keepdims=True)
        r = 1.0 / np.sqrt(var + eps)
        xhat = centered * r
        if update_running and running_mean is not None:
            unbiased = var.reshape(c) * (m / (m - 1)) if m > 1 else var.reshape(c)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        y = _out(g * xhat + b, x, gamma, beta)

        def bwd(gy):
            if gamma.requires_grad:
                accumulate(gamma, (gy * xhat).sum(axis=axes))
            if beta.requires_grad:
                accumulate(beta, gy.sum(axis=axes))
            if x.requires_grad:
                gxh = gy * g
                accumulate(x, r * (gxh - gxh.mean(axis=axes, keepdims=True)
                                   - xhat * (gxh * xhat).mean(axis=axes, keepdims=True)))

        record(y, bwd)
        return y

    if running_mean is None or running_var is None:
        raise ShapeError("batchnorm in eval mode needs running statistics")
    r = (1.0 / np.sqrt(running_var + eps)).reshape(ash)
    mu = running_mean.reshape(ash)
    xhat = (x.data - mu) * r
    y = _out(g * xhat + b, x, gamma, beta)

    def bwd_eval(gy):
        if gamma.requires_grad:
            accumulate(gamma, (gy * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate(beta, gy.sum(axis=axes))
        if x.requires_grad:
            accumulate(x, gy * g * r)

    record(y, bwd_eval)
    return y


def groupnorm(x, gamma, beta, groups, eps=1e-5):
    """Per-sample normalization over channel groups (groups=1 is layernorm-2d)."""
    if x.ndim != 4:
        raise ShapeError(f"groupnorm needs (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"groupnorm groups={groups} must divide {c} channels")
    xg = x.data.reshape(n, groups, c // groups, h, w)
    axes = (2, 3, 4)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * r
    xhat = xhat_g.reshape(n, c, h, w)
    g = gamma.data.reshape(1, c, 1, 1)
    y = _out(g * xhat + beta.data.reshape(1, c, 1, 1), x, gamma, beta)

    def bwd(gy):
        if gamma.requires_grad:
            accumulate(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            accumulate(beta, gy.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxh = (gy * g).reshape(n, groups, c // groups, h, w)
            gx = r * (gxh - gxh.mean(axis=axes, keepdims=True)
                      - xhat_g * (gxh * xhat_g).mean(axis=axes, keepdims=True))
            accumulate(x, gx.reshape(n, c, h, w))

    record(y, bwd)
    return y


def channel_scale(x, s):
    """x (N,C,H,W) scaled per (sample, channel) by s (N,C); SE-style gating."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale needs (N,C,H,W) and (N,C), got {x.shape} and {s.shape}")
    sd = s.data[:, :, None, None]
    y = _out(x.data * sd, x, s)

    def bwd(gy):
        accumulate(x, gy * sd)
        if s.requires_grad:
            accumulate(s, (gy * x.data).sum(axis=(2, 3)))

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------


def cross_entropy(logits, labels, class_weights=None):
    """Mean negative log-likelihood of integer labels under softmax logits.

    With class_weights (length-C array) the per-sample terms are weighted
    by their label's weight and normalized by the weight sum.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs (N,C) logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0,{c}) in cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    ls = z - lse
    picked = ls[np.arange(n), labels]
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=np.float64)
        if (cw <= 0).any():
            raise ValueError("class weights must be positive")
        wi = cw[labels]
        scale = wi / wi.sum()
    else:
        scale = np.full(n, 1.0 / n)
    y = _out(np.asarray(-(picked * scale).sum()), logits)

    def bwd(gy):
        if not logits.requires_grad:
            return
        p = np.exp(ls)
        p[np.arange(n), labels] -= 1.0
        accumulate(logits, float(gy) * p * scale[:, None])

    record(y, bwd)
    return y


# ---------------------------------------------------------------------------
# name-keyed dispatch
# ---------------------------------------------------------------------------

_PRIMITIVES = {
    "conv2d": lambda ins, at: conv2d(ins[0], ins[1], **at),
    "matmul": lambda ins, at: matmul(ins[0], ins[1]),
    "add": lambda ins, at: add(ins[0], ins[1]),
    "broadcast_add": lambda ins, at: broadcast_add(ins[0], ins[1]),
    "scalar_multiply": lambda ins, at: scalar_mul(ins[0], at.get("value", ins[1] if len(ins) > 1 else None)),
    "elementwise_multiply": lambda ins, at: mul(ins[0], ins[1]),
    "weighted_sum": lambda ins, at: weighted_sum(ins[:-1], ins[-1]),
    "concat": lambda ins, at: concat(ins, **at),
    "split": lambda ins, at: split(ins[0], **at),
    "relu": lambda ins, at: relu(ins[0]),
    "sigmoid": lambda ins, at: sigmoid(ins[0]),
    "gelu": lambda ins, at: gelu(ins[0]),
    "batchnorm": lambda ins, at: batchnorm(*ins, **at),
    "groupnorm": lambda ins, at: groupnorm(*ins, **at),
    "channel_scale": lambda ins, at: channel_scale(ins[0], ins[1]),
    "max_pool": lambda ins, at: max_pool2d(ins[0], **at),
    "avg_pool": lambda ins, at: avg_pool2d(ins[0], **at),
    "global_avg_pool": lambda ins, at: global_avg_pool(ins[0]),
    "softmax": lambda ins, at: softmax(ins[0], **at),
    "log_softmax": lambda ins, at: log_softmax(ins[0], **at),
    "sum": lambda ins, at: sum_(ins[0]),
    "mean": lambda ins, at: mean_(ins[0]),
    "cross_entropy": lambda ins, at: cross_entropy(ins[0], **at),
}


def primitive_names():
    return sorted(_PRIMITIVES)


def apply_primitive(kind, inputs, attrs=None):
    """Apply a primitive by name. split returns a tuple; everything else a Tensor."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}; known: {primitive_names()}")
    return fn(list(inputs), dict(attrs or {}))
