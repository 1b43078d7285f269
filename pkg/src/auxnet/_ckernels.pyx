# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im loops.

Row layout matches the numpy fallback exactly: one row per output pixel
ordered (batch, out_row, out_col), columns ordered (channel, ki, kj).
"""
import numpy as np

ctypedef fused floating_t:
    float
    double


def im2col(const floating_t[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    if floating_t is float:
        out = np.empty((B * Ho * Wo, C * k * k), dtype=np.float32)
    else:
        out = np.empty((B * Ho * Wo, C * k * k), dtype=np.float64)
    cdef floating_t[:, ::1] cols = out
    cdef Py_ssize_t b, c, oh, ow, i, j, ih, iw, row, col
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    row = (b * Ho + oh) * Wo + ow
                    col = 0
                    for c in range(C):
                        for i in range(k):
                            ih = oh * stride - pad + i
                            for j in range(k):
                                iw = ow * stride - pad + j
                                if ih >= 0 and ih < H and iw >= 0 and iw < W:
                                    cols[row, col] = x[b, c, ih, iw]
                                else:
                                    cols[row, col] = 0
                                col += 1
    return out


def col2im(const floating_t[:, ::1] cols, Py_ssize_t B, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, int k, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    if floating_t is float:
        out = np.zeros((B, C, H, W), dtype=np.float32)
    else:
        out = np.zeros((B, C, H, W), dtype=np.float64)
    cdef floating_t[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, c, oh, ow, i, j, ih, iw, row, col
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    row = (b * Ho + oh) * Wo + ow
                    col = 0
                    for c in range(C):
                        for i in range(k):
                            ih = oh * stride - pad + i
                            for j in range(k):
                                iw = ow * stride - pad + j
                                if ih >= 0 and ih < H and iw >= 0 and iw < W:
                                    dx[b, c, ih, iw] += cols[row, col]
                                col += 1
    return out
