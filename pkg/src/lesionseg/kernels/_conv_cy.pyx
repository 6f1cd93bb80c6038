# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch gather/scatter kernels for 2-D convolution.

Bit-identical to the pure-numpy backend: the scatter accumulates per
kernel tap in the same fixed (ki, kj) order, and within one tap each
destination element is written at most once.
"""

import numpy as np

cimport cython

BACKEND = "cython"

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
           int dh, int dw, int ph, int pw, int oh, int ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n, c * kh * kw, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t i, ci, ki, kj, oy, ox, row, iy, ix
    for i in range(n):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = ((ci * kh + ki) * kw) + kj
                    for oy in range(oh):
                        iy = oy * sh + ki * dh - ph
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * sw + kj * dw - pw
                            if 0 <= ix < w:
                                cols[i, row, oy * ow + ox] = x[i, ci, iy, ix]
    return out


def col2im(floating[:, :, ::1] cols, int n, int c, int h, int w,
           int kh, int kw, int sh, int sw, int dh, int dw,
           int ph, int pw, int oh, int ow):
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    cdef Py_ssize_t i, ci, ki, kj, oy, ox, row, iy, ix
    for i in range(n):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = ((ci * kh + ki) * kw) + kj
                    for oy in range(oh):
                        iy = oy * sh + ki * dh - ph
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * sw + kj * dw - pw
                            if 0 <= ix < w:
                                x[i, ci, iy, ix] += cols[i, row, oy * ow + ox]
    return out
