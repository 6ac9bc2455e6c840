# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled im2col/col2im with implicit zero padding.

Layout contract (shared with pykernels):
  cols has shape (N, G, K, L) with K = (C/G)*kh*kw and L = h_out*w_out,
  row index k = (c_local*kh + i)*kw + j, column index l = ho*w_out + wo.

Bounds are resolved per kernel tap before the innermost loop, so the
stride-1 case is a straight memcpy and the strided case a branch-free
gather/scatter.
"""

from libc.string cimport memcpy

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) noexcept nogil:
    # smallest t >= 0 with off + t*stride >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t size, Py_ssize_t n) noexcept nogil:
    # smallest exclusive bound t <= n with off + t*stride <= size-1
    cdef Py_ssize_t t
    if off > size - 1:
        return 0
    t = (size - 1 - off) // stride + 1
    return t if t < n else n


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int dilation,
           int padding, int groups, int h_out, int w_out):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t c = x.shape[1]
    cdef Py_ssize_t h = x.shape[2]
    cdef Py_ssize_t w = x.shape[3]
    cdef Py_ssize_t cg = c // groups
    cdef Py_ssize_t kk = cg * kh * kw
    cdef Py_ssize_t ll = h_out * w_out
    out = np.zeros((n, groups, kk, ll), dtype=np.float64)
    cdef double[:, :, :, ::1] cols = out
    cdef Py_ssize_t nn, ch, g, k0, i, j, k, ho, wo, hi, woff, hoff
    cdef Py_ssize_t ho_lo, ho_hi, wo_lo, wo_hi, span
    cdef const double *src
    cdef double *dst
    with nogil:
        for nn in range(n):
            for ch in range(c):
                g = ch // cg
                k0 = (ch % cg) * kh * kw
                for i in range(kh):
                    hoff = i * dilation - padding
                    ho_lo = _lo(hoff, stride)
                    ho_hi = _hi(hoff, stride, h, h_out)
                    for j in range(kw):
                        woff = j * dilation - padding
                        wo_lo = _lo(woff, stride)
                        wo_hi = _hi(woff, stride, w, w_out)
                        if wo_hi <= wo_lo:
                            continue
                        k = k0 + i * kw + j
                        span = wo_hi - wo_lo
                        for ho in range(ho_lo, ho_hi):
                            hi = hoff + ho * stride
                            src = &x[nn, ch, hi, woff + wo_lo * stride]
                            dst = &cols[nn, g, k, ho * w_out + wo_lo]
                            if stride == 1:
                                memcpy(dst, src, span * sizeof(double))
                            else:
                                for wo in range(span):
                                    dst[wo] = src[wo * stride]
    return out


def col2im(double[:, :, :, ::1] cols, int c, int h, int w, int kh, int kw,
           int stride, int dilation, int padding, int groups, int h_out, int w_out):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t cg = c // groups
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = out
    cdef Py_ssize_t nn, ch, g, k0, i, j, k, ho, wo, hi, woff, hoff
    cdef Py_ssize_t ho_lo, ho_hi, wo_lo, wo_hi, span
    cdef const double *src
    cdef double *dst
    with nogil:
        for nn in range(n):
            for ch in range(c):
                g = ch // cg
                k0 = (ch % cg) * kh * kw
                for i in range(kh):
                    hoff = i * dilation - padding
                    ho_lo = _lo(hoff, stride)
                    ho_hi = _hi(hoff, stride, h, h_out)
                    for j in range(kw):
                        woff = j * dilation - padding
                        wo_lo = _lo(woff, stride)
                        wo_hi = _hi(woff, stride, w, w_out)
                        if wo_hi <= wo_lo:
                            continue
                        k = k0 + i * kw + j
                        span = wo_hi - wo_lo
                        for ho in range(ho_lo, ho_hi):
                            hi = hoff + ho * stride
                            dst = &gx[nn, ch, hi, woff + wo_lo * stride]
                            src = &cols[nn, g, k, ho * w_out + wo_lo]
                            if stride == 1:
                                for wo in range(span):
                                    dst[wo] += src[wo]
                            else:
                                for wo in range(span):
                                    dst[wo * stride] += src[wo]
    return out
