"""Pure-numpy fallback kernels.

Implements the two loop-bound kernels that the compiled extension
accelerates: depthwise convolution and per-site adaptive (3x3) filtering.
Channel-mixing convolutions never land here; they are expressed as matmuls
in `_convops.py` regardless of backend.
"""

import numpy as np

BACKEND_NAME = "python"


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def dw_conv2d_forward(x, w, stride, padding):
    """Depthwise convolution: x (B,C,H,W), w (C,1,kh,kw), groups == C."""
    B, C, H, W = x.shape
    _, _, kh, kw = w.shape
    Hout = _out_size(H, kh, stride, padding)
    Wout = _out_size(W, kw, stride, padding)
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, C, Hout, Wout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * Hout : stride,
                       j : j + stride * Wout : stride]
            out += patch * w[None, :, 0, i, j, None, None]
    return out


def dw_conv2d_backward(x, w, grad_out, stride, padding, need_x, need_w):
    B, C, H, W = x.shape
    _, _, kh, kw = w.shape
    Hout, Wout = grad_out.shape[2], grad_out.shape[3]
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gxp = np.zeros_like(xp) if need_x else None
    gw = np.zeros_like(w) if need_w else None
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * Hout, stride)
            cols = slice(j, j + stride * Wout, stride)
            if need_w:
                gw[:, 0, i, j] = (grad_out * xp[:, :, rows, cols]).sum(axis=(0, 2, 3))
            if need_x:
                gxp[:, :, rows, cols] += grad_out * w[None, :, 0, i, j, None, None]
    gx = None
    if need_x:
        if padding:
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + H,
                                          padding : padding + W])
        else:
            gx = gxp
    return gx, gw


def saf_apply_forward(x, saf):
    """Apply per-site 3x3 filter banks.

    x: (B, C, H, W); saf: (B, G, 4, 9, H, W) with C divisible by G.
    Returns (B, 4*C, H, W) where output channel c*4+f holds filter f of the
    bank for input channel c, filters normalized by the caller.
    """
    B, C, H, W = x.shape
    G = saf.shape[1]
    gd = C // G
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    xg = xp.reshape(B, G, gd, H + 2, W + 2)
    acc = np.zeros((B, G, gd, 4, H, W), dtype=x.dtype)
    for t in range(9):
        di, dj = t // 3, t % 3
        patch = xg[:, :, :, None, di : di + H, dj : dj + W]
        acc += patch * saf[:, :, None, :, t]
    return acc.reshape(B, 4 * C, H, W)


def saf_apply_backward(x, saf, grad_out, need_x, need_saf):
    B, C, H, W = x.shape
    G = saf.shape[1]
    gd = C // G
    go = grad_out.reshape(B, G, gd, 4, H, W)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    xg = xp.reshape(B, G, gd, H + 2, W + 2)
    gxp = np.zeros_like(xg) if need_x else None
    gsaf = np.zeros_like(saf) if need_saf else None
    for t in range(9):
        di, dj = t // 3, t % 3
        if need_saf:
            patch = xg[:, :, :, None, di : di + H, dj : dj + W]
            gsaf[:, :, :, t] = (go * patch).sum(axis=2)
        if need_x:
            gxp[:, :, :, di : di + H, dj : dj + W] += (
                go * saf[:, :, None, :, t]).sum(axis=3)
    gx = None
    if need_x:
        gx = np.ascontiguousarray(
            gxp.reshape(B, C, H + 2, W + 2)[:, :, 1 : 1 + H, 1 : 1 + W])
    return gx, gsaf
