"""Pure-numpy im2col/col2im, the fallback for the compiled extension.

Layout contract (shared with the compiled kernels):
  cols has shape (N, G, K, L) with K = (C/G)*kh*kw and L = h_out*w_out,
  row index k = (c_local*kh + i)*kw + j, column index l = ho*w_out + wo.
Padding is implicit (zero) like the compiled version.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _zero_pad(x, p):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def im2col(x, kh, kw, stride, dilation, padding, groups, h_out, w_out):
    """Unfold (N, C, H, W) into (N, G, K, L) patch columns."""
    n, c, _, _ = x.shape
    cg = c // groups
    xp = _zero_pad(x, padding) if padding else x
    span_h = (kh - 1) * dilation + 1
    span_w = (kw - 1) * dilation + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    # (N, C, h_out, w_out, kh, kw) -> (N, C, kh, kw, h_out, w_out)
    win = win.transpose(0, 1, 4, 5, 2, 3)
    cols = win.reshape(n, groups, cg * kh * kw, h_out * w_out)
    return np.ascontiguousarray(cols)


def col2im(cols, c, h, w, kh, kw, stride, dilation, padding, groups, h_out, w_out):
    """Fold (N, G, K, L) patch-column gradients back onto the input canvas."""
    n = cols.shape[0]
    hp, wp = h + 2 * padding, w + 2 * padding
    gxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, h_out, w_out)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            gxp[:, :, hi : hi + stride * h_out : stride, wj : wj + stride * w_out : stride] += cols6[:, :, i, j]
    if padding:
        return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w])
    return gxp
