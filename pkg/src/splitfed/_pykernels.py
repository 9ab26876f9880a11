"""Pure-numpy kernels.

Reference implementation of the hot loops used by :mod:`splitfed.nn`. The
compiled ``_ckernels`` module exposes the same functions and must produce
bit-identical results, so summation orders here are spelled out explicitly
rather than left to numpy reductions.
"""
import numpy as np


def im2col(x, k, pad):
    """Unfold a channel-major ``(C, B, H, W)`` array into ``(C*k*k, B*H*W)`` columns.

    Row index is ``(c*k + ki)*k + kj``; out-of-image taps read zero.
    """
    C, B, H, W = x.shape
    if pad:
        xp = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = x
    cols = np.empty((C, k, k, B, H, W), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, ki:ki + H, kj:kj + W]
    return cols.reshape(C * k * k, B * H * W)


def col2im(cols, shape, k, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the image."""
    C, B, H, W = shape
    cols = cols.reshape(C, k, k, B, H, W)
    dxp = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + H, kj:kj + W] += cols[:, ki, kj]
    return np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W])


def maxpool2_forward(x):
    """2x2 max pool over the last two axes; returns ``(out, window_argmax)``."""
    A, B, H, W = x.shape
    win = (
        x.reshape(A, B, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(A, B, H // 2, W // 2, 4)
    )
    # argmax returns the first maximum, i.e. row-major window order on ties
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(dout, idx):
    B, C, Ho, Wo = dout.shape
    dwin = np.zeros((B, C, Ho, Wo, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    return np.ascontiguousarray(
        dwin.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo)
    )


def upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dout):
    return ((dout[:, :, 0::2, 0::2] + dout[:, :, 0::2, 1::2]) + dout[:, :, 1::2, 0::2]) + dout[:, :, 1::2, 1::2]
