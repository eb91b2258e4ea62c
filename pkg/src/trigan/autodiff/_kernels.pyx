"""Compiled im2col / col2im for the convolution primitives.

Loop order matches ``_kernels_py`` so both backends accumulate in the same
order and agree bit-for-bit.
"""
import numpy as np


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, C * kh * kw, OH * OW), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t n, c, i, j, oh, ow, ih, iw, row
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oh in range(OH):
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(OW):
                                iw = ow * stride - pad + j
                                if iw < 0 or iw >= W:
                                    continue
                                cols[n, row, oh * OW + ow] = x[n, c, ih, iw]
    return out


def col2im(const double[:, :, ::1] cols, int C, int H, int W,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = cols.shape[0]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    if cols.shape[1] != C * kh * kw or cols.shape[2] != OH * OW:
        raise ValueError(
            f"col2im: columns shape {tuple(cols.shape)[:3]} does not match "
            f"(N, {C * kh * kw}, {OH * OW})"
        )
    out = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t n, c, i, j, oh, ow, ih, iw, row
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oh in range(OH):
                            ih = oh * stride - pad + i
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(OW):
                                iw = ow * stride - pad + j
                                if iw < 0 or iw >= W:
                                    continue
                                x[n, c, ih, iw] += cols[n, row, oh * OW + ow]
    return out
