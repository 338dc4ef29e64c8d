# cython: language_level=3
"""Compiled im2col / col2im kernels for strided 2-D convolution.

Inputs are already zero padded. Loop order in ``col2im`` matches the
pure-Python fallback so both backends accumulate in the same order and
produce bit-identical results.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int out_h, int out_w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t b, c, ki, kj, oh, ow, row, base
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C * kh * kw, out_h * out_w), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (c * kh + ki) * kw + kj
                        for oh in range(out_h):
                            base = oh * out_w
                            for ow in range(out_w):
                                cols[b, row, base + ow] = x[b, c, oh * stride + ki, ow * stride + kj]
    return out


def col2im(real[:, :, ::1] cols, int C, int hp, int wp, int kh, int kw,
           int stride, int out_h, int out_w):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t b, c, ki, kj, oh, ow, row, base
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (c * kh + ki) * kw + kj
                        for oh in range(out_h):
                            base = oh * out_w
                            for ow in range(out_w):
                                x[b, c, oh * stride + ki, ow * stride + kj] += cols[b, row, base + ow]
    return out
