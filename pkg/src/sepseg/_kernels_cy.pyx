# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the loop-bound hot spots.

Depthwise convolution and per-site adaptive (3x3) filtering touch each
element only a handful of times, so fused typed loops beat numpy's
allocate-per-offset broadcasting.  Channel-mixing convolutions are matmuls
and stay on BLAS (see `_convops.py`) regardless of backend.
"""

import numpy as np

cimport cython

ctypedef fused floating:
    float
    double

BACKEND_NAME = "cython"


def dw_conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                      int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Hout = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wout = (W + 2 * padding - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, C, Hout, Wout), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, oh, ow, i, j, ih, iw
    cdef floating acc
    for b in range(B):
        for c in range(C):
            for oh in range(Hout):
                for ow in range(Wout):
                    acc = 0
                    for i in range(kh):
                        ih = oh * stride + i - padding
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(kw):
                            iw = ow * stride + j - padding
                            if iw < 0 or iw >= W:
                                continue
                            acc += x[b, c, ih, iw] * w[c, 0, i, j]
                    out[b, c, oh, ow] = acc
    return out_arr


def dw_conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                       floating[:, :, :, ::1] grad_out, int stride, int padding,
                       bint need_x, bint need_w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Hout = grad_out.shape[2], Wout = grad_out.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((B, C, H, W), dtype=dtype) if need_x else None
    gw_arr = np.zeros((C, 1, kh, kw), dtype=dtype) if need_w else None
    cdef floating[:, :, :, ::1] gx = gx_arr if need_x else x[:0]
    cdef floating[:, :, :, ::1] gw = gw_arr if need_w else w[:0]
    cdef Py_ssize_t b, c, oh, ow, i, j, ih, iw
    cdef floating g
    for b in range(B):
        for c in range(C):
            for oh in range(Hout):
                for ow in range(Wout):
                    g = grad_out[b, c, oh, ow]
                    for i in range(kh):
                        ih = oh * stride + i - padding
                        if ih < 0 or ih >= H:
                            continue
                        for j in range(kw):
                            iw = ow * stride + j - padding
                            if iw < 0 or iw >= W:
                                continue
                            if need_w:
                                gw[c, 0, i, j] += g * x[b, c, ih, iw]
                            if need_x:
                                gx[b, c, ih, iw] += g * w[c, 0, i, j]
    return gx_arr, gw_arr


def saf_apply_forward(floating[:, :, :, ::1] x, floating[:, :, :, :, :, ::1] saf):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t G = saf.shape[1]
    cdef Py_ssize_t gd = C // G
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, 4 * C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, g, f, h, w_, t, ih, iw
    cdef floating acc
    for b in range(B):
        for c in range(C):
            g = c // gd
            for f in range(4):
                for h in range(H):
                    for w_ in range(W):
                        acc = 0
                        for t in range(9):
                            ih = h + t // 3 - 1
                            iw = w_ + t % 3 - 1
                            if ih < 0 or ih >= H or iw < 0 or iw >= W:
                                continue
                            acc += x[b, c, ih, iw] * saf[b, g, f, t, h, w_]
                        out[b, c * 4 + f, h, w_] = acc
    return out_arr


def saf_apply_backward(floating[:, :, :, ::1] x, floating[:, :, :, :, :, ::1] saf,
                       floating[:, :, :, ::1] grad_out, bint need_x, bint need_saf):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t G = saf.shape[1]
    cdef Py_ssize_t gd = C // G
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((B, C, H, W), dtype=dtype) if need_x else None
    gsaf_arr = np.zeros((B, G, 4, 9, H, W), dtype=dtype) if need_saf else None
    cdef floating[:, :, :, ::1] gx = gx_arr if need_x else x[:0]
    cdef floating[:, :, :, :, :, ::1] gsaf = gsaf_arr if need_saf else saf[:0]
    cdef Py_ssize_t b, c, g, f, h, w_, t, ih, iw
    cdef floating go
    for b in range(B):
        for c in range(C):
            g = c // gd
            for f in range(4):
                for h in range(H):
                    for w_ in range(W):
                        go = grad_out[b, c * 4 + f, h, w_]
                        for t in range(9):
                            ih = h + t // 3 - 1
                            iw = w_ + t % 3 - 1
                            if ih < 0 or ih >= H or iw < 0 or iw >= W:
                                continue
                            if need_saf:
                                gsaf[b, g, f, t, h, w_] += go * x[b, c, ih, iw]
                            if need_x:
                                gx[b, c, ih, iw] += go * saf[b, g, f, t, h, w_]
    return gx_arr, gsaf_arr
