"""Convolution kernels with a compiled core and a pure-numpy fallback.

The hot loops (im2col/col2im, with implicit zero padding) come from the
Cython extension when it is built; otherwise the numpy implementations are
used. Selection happens at import and can be forced with
TAILNAS_KERNELS={auto,compiled,python}. The GEMMs are numpy either way.
"""

import os

import numpy as np

from tailnas.kernels import pykernels

_choice = os.environ.get("TAILNAS_KERNELS", "auto")
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(f"TAILNAS_KERNELS must be auto|compiled|python, got {_choice!r}")

if _choice == "python":
    _impl = pykernels
    BACKEND = "python"
else:
    try:
        from tailnas.kernels import _convkernels as _impl

        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im


def conv_out_size(size, kernel, stride, padding, dilation):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _is_pointwise(kh, kw, padding):
    return kh == 1 and kw == 1 and padding == 0


def conv2d_forward(x, w, stride, padding, dilation, groups, impl=None):
    """Grouped, dilated 2-D convolution. x (N,Cin,H,W), w (Cout,Cin/G,kh,kw)."""
    impl = impl or _impl
    n, cin, h, wid = x.shape
    cout, cg, kh, kw = w.shape
    h_out = conv_out_size(h, kh, stride, padding, dilation)
    w_out = conv_out_size(wid, kw, stride, padding, dilation)
    if not x.flags.c_contiguous:
        x = np.ascontiguousarray(x)
    wg = w.reshape(groups, cout // groups, cg * kh * kw)
    if _is_pointwise(kh, kw, padding):
        # 1x1: the unfolded matrix is just a (strided) reshape of x
        xs = x if stride == 1 else np.ascontiguousarray(x[:, :, ::stride, ::stride])
        cols = xs.reshape(n, groups, cg, h_out * w_out)
    else:
        cols = impl.im2col(x, kh, kw, stride, dilation, padding, groups, h_out, w_out)
    y = np.matmul(wg, cols)  # (N, G, Cout/G, L)
    return y.reshape(n, cout, h_out, w_out)


def conv2d_backward(gy, x, w, stride, padding, dilation, groups, need_gx, need_gw, impl=None):
    """Gradients of conv2d_forward w.r.t. input and weight.

    im2col is recomputed from x rather than cached at forward time; the
    memory saved matters more than the extra pass at supernet scale.
    """
    impl = impl or _impl
    n, cin, h, wid = x.shape
    cout, cg, kh, kw = w.shape
    h_out, w_out = gy.shape[2], gy.shape[3]
    kk = cg * kh * kw
    gyg = gy.reshape(n, groups, cout // groups, h_out * w_out)
    pointwise = _is_pointwise(kh, kw, padding)
    gw = None
    if need_gw:
        if not x.flags.c_contiguous:
            x = np.ascontiguousarray(x)
        if pointwise:
            xs = x if stride == 1 else np.ascontiguousarray(x[:, :, ::stride, ::stride])
            cols = xs.reshape(n, groups, cg, h_out * w_out)
        else:
            cols = impl.im2col(x, kh, kw, stride, dilation, padding, groups, h_out, w_out)
        gw = np.matmul(gyg, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    gx = None
    if need_gx:
        wg = w.reshape(groups, cout // groups, kk)
        gcols = np.matmul(wg.transpose(0, 2, 1), gyg)
        if pointwise:
            gfull = gcols.reshape(n, cin, h_out, w_out)
            if stride == 1:
                gx = gfull
            else:
                gx = np.zeros_like(x)
                gx[:, :, ::stride, ::stride] = gfull
        else:
            gcols = np.ascontiguousarray(gcols)
            gx = impl.col2im(gcols, cin, h, wid, kh, kw, stride, dilation, padding, groups, h_out, w_out)
    return gx, gw
