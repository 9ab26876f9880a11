# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; drop-in twin of splitfed._pykernels.

Every loop nest accumulates in the same order as the numpy version so that
the two backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(const floating[:, :, :, ::1] x, int k, int pad):
    cdef Py_ssize_t C = x.shape[0], B = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t HW = H * W
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((C * k * k, B * HW), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef floating* dst
    cdef const floating* src
    cdef Py_ssize_t b, c, ki, kj, i, j, si, j0, j1, off
    with nogil:
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    off = kj - pad
                    # valid output columns j satisfy 0 <= j + off < W
                    j0 = -off if off < 0 else 0
                    j1 = W - off if off > 0 else W
                    for b in range(B):
                        dst = &cols[(c * k + ki) * k + kj, b * HW]
                        for i in range(H):
                            si = i + ki - pad
                            if si < 0 or si >= H:
                                continue
                            src = &x[c, b, si, 0]
                            for j in range(j0, j1):
                                dst[i * W + j] = src[j + off]
    return out


def col2im(const floating[:, ::1] cols, shape, int k, int pad):
    cdef Py_ssize_t C = shape[0], B = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t HW = H * W
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((C, B, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef floating* dst
    cdef const floating* src
    cdef Py_ssize_t b, c, ki, kj, i, j, si, j0, j1, off
    with nogil:
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    off = kj - pad
                    j0 = -off if off < 0 else 0
                    j1 = W - off if off > 0 else W
                    for b in range(B):
                        src = &cols[(c * k + ki) * k + kj, b * HW]
                        for i in range(H):
                            si = i + ki - pad
                            if si < 0 or si >= H:
                                continue
                            dst = &dx[c, b, si, 0]
                            for j in range(j0, j1):
                                dst[j + off] = dst[j + off] + src[i * W + j]
    return out


def maxpool2_forward(const floating[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], Ho = x.shape[2] // 2, Wo = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    idx_arr = np.empty((B, C, Ho, Wo), dtype=np.uint8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.uint8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, i, j
    cdef floating best, v
    cdef cnp.uint8_t arg
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[b, c, 2 * i, 2 * j]
                        arg = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 3
                        out[b, c, i, j] = best
                        idx[b, c, i, j] = arg
    return out_arr, idx_arr


def maxpool2_backward(const floating[:, :, :, ::1] dout, const cnp.uint8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], Ho = dout.shape[2], Wo = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((B, C, 2 * Ho, 2 * Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, i, j
    cdef int a
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        a = idx[b, c, i, j]
                        dx[b, c, 2 * i + (a >> 1), 2 * j + (a & 1)] = dout[b, c, i, j]
    return dx_arr


def upsample2_forward(const floating[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, C, 2 * H, 2 * W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j
    cdef floating v
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        v = x[b, c, i, j]
                        out[b, c, 2 * i, 2 * j] = v
                        out[b, c, 2 * i, 2 * j + 1] = v
                        out[b, c, 2 * i + 1, 2 * j] = v
                        out[b, c, 2 * i + 1, 2 * j + 1] = v
    return out_arr


def upsample2_backward(const floating[:, :, :, ::1] dout):
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], H = dout.shape[2] // 2, W = dout.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, i, j
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        dx[b, c, i, j] = ((dout[b, c, 2 * i, 2 * j] + dout[b, c, 2 * i, 2 * j + 1])
                                          + dout[b, c, 2 * i + 1, 2 * j]) + dout[b, c, 2 * i + 1, 2 * j + 1]
    return dx_arr
