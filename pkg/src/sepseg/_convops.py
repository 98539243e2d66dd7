"""Convolution forward/backward built on BLAS matmuls (im2col).

These paths are shared by both kernel backends: for channel-mixing
convolutions a single large matmul beats any explicit loop, so only the
loop-bound kernels (depthwise, per-site adaptive filters) differ per backend;
see `backend.py`.
"""

import numpy as np

from . import backend


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(x, kh, kw, stride, padding, Hout, Wout):
    """(B,C,H,W) -> (B, C, kh, kw, Hout, Wout) gathered patch tensor."""
    B, C, _, _ = x.shape
    xp = _pad(x, padding)
    cols = np.empty((B, C, kh, kw, Hout, Wout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Hout : stride,
                                  j : j + stride * Wout : stride]
    return cols


def _col2im(g6, in_shape, stride, padding, Hout, Wout):
    """Adjoint of _im2col: scatter-add patches back to the input grid."""
    B, C, H, W = in_shape
    kh, kw = g6.shape[2], g6.shape[3]
    gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=g6.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * Hout : stride,
                j : j + stride * Wout : stride] += g6[:, :, i, j]
    if padding == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, padding : padding + H, padding : padding + W])


def conv2d_forward(x, w, stride, padding, groups):
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = w.shape
    Hout = _out_size(H, kh, stride, padding)
    Wout = _out_size(W, kw, stride, padding)

    if kh == 1 and kw == 1 and stride == 1 and groups == 1:
        out = np.matmul(w[:, :, 0, 0], _pad(x, padding).reshape(B, Cin, -1))
        return np.ascontiguousarray(out.reshape(B, Cout, Hout, Wout))

    if groups == Cin and Cout == Cin and cin_g == 1:
        return backend.dw_conv2d_forward(x, np.ascontiguousarray(w), stride, padding)

    cols = _im2col(x, kh, kw, stride, padding, Hout, Wout)
    N = Hout * Wout
    if groups == 1:
        out = np.matmul(w.reshape(Cout, -1), cols.reshape(B, -1, N))
        return np.ascontiguousarray(out.reshape(B, Cout, Hout, Wout))
    cout_g = Cout // groups
    out = np.empty((B, Cout, N), dtype=x.dtype)
    for g in range(groups):
        wg = w[g * cout_g : (g + 1) * cout_g].reshape(cout_g, -1)
        cg = np.ascontiguousarray(cols[:, g * cin_g : (g + 1) * cin_g]).reshape(B, -1, N)
        out[:, g * cout_g : (g + 1) * cout_g] = np.matmul(wg, cg)
    return np.ascontiguousarray(out.reshape(B, Cout, Hout, Wout))


def conv2d_backward(x, w, grad_out, stride, padding, groups, need_x, need_w):
    B, Cin, H, W = x.shape
    Cout, cin_g, kh, kw = w.shape
    Hout, Wout = grad_out.shape[2], grad_out.shape[3]
    N = Hout * Wout

    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        go = grad_out.reshape(B, Cout, N)
        gx = gw = None
        if need_x:
            gx = np.ascontiguousarray(np.matmul(w[:, :, 0, 0].T, go).reshape(B, Cin, H, W))
        if need_w:
            gw = np.matmul(go, x.reshape(B, Cin, N).transpose(0, 2, 1)).sum(axis=0)
            gw = np.ascontiguousarray(gw.reshape(Cout, cin_g, 1, 1))
        return gx, gw

    if groups == Cin and Cout == Cin and cin_g == 1:
        return backend.dw_conv2d_backward(x, np.ascontiguousarray(w), grad_out,
                                          stride, padding, need_x, need_w)

    cols = _im2col(x, kh, kw, stride, padding, Hout, Wout)
    cout_g = Cout // groups
    gw = np.empty_like(w) if need_w else None
    g6 = np.empty_like(cols) if need_x else None
    for g in range(groups):
        sl_in = slice(g * cin_g, (g + 1) * cin_g)
        sl_out = slice(g * cout_g, (g + 1) * cout_g)
        go_g = grad_out[:, sl_out].reshape(B, cout_g, N)
        if need_w:
            cg = np.ascontiguousarray(cols[:, sl_in]).reshape(B, -1, N)
            gw_g = np.matmul(go_g, cg.transpose(0, 2, 1)).sum(axis=0)
            gw[sl_out] = gw_g.reshape(cout_g, cin_g, kh, kw)
        if need_x:
            wg = w[sl_out].reshape(cout_g, -1)
            gcols = np.matmul(wg.T, go_g)                     # (B, cin_g*kh*kw, N)
            g6[:, sl_in] = gcols.reshape(B, cin_g, kh, kw, Hout, Wout)
    gx = _col2im(g6, x.shape, stride, padding, Hout, Wout) if need_x else None
    return gx, gw
