"""Pure-numpy convolution and pooling kernels.

This is the fallback backend: every function here has the same contract as
its compiled counterpart in ``_native`` and is the reference the native
kernels are tested against.  Convolution is im2col + one big matmul; the
col2im scatter in the backward pass is done with one strided slice-add per
kernel tap, which keeps it vectorized.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def _im2col(xp, kh, kw, stride):
    # xp: padded input (B, C, Hp, Wp) -> (B, Ho, Wo, C, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))


def conv2d_forward(x, w, stride, padding):
    """Cross-correlate x (B,C,H,W) with w (F,C,kh,kw); returns (B,F,Ho,Wo)."""
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride).reshape(b * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, stride, padding, gout, need_gx=True, need_gw=True):
    """Gradients of conv2d_forward w.r.t. input and kernel.

    gout has the forward output's shape (B,F,Ho,Wo); returns (gx, gw), with
    None standing in for a gradient the caller did not ask for.
    """
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    _, _, ho, wo = gout.shape
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    g2 = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(b * ho * wo, f)

    gw = None
    if need_gw:
        cols = _im2col(xp, kh, kw, stride).reshape(b * ho * wo, c * kh * kw)
        gw = (g2.T @ cols).reshape(f, c, kh, kw)

    gx = None
    if need_gx:
        gcols = (g2 @ w.reshape(f, -1)).reshape(b, ho, wo, c, kh, kw)
        gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # (B, C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += gcols[:, :, u, v]
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        else:
            gx = gxp
        gx = np.ascontiguousarray(gx)
    return gx, gw


def maxpool2d_forward(x, ksize, stride):
    """Max pooling over non-overlapping-capable windows; returns (out, argmax).

    argmax holds flat within-window indices used by the backward pass.
    """
    b, c, h, w = x.shape
    ho = (h - ksize) // stride + 1
    wo = (w - ksize) // stride + 1
    windows = sliding_window_view(x, (ksize, ksize), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(b, c, ho, wo, ksize * ksize)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2d_backward(x_shape, ksize, stride, arg, gout):
    b, c, h, w = x_shape
    _, _, ho, wo = gout.shape
    gx = np.zeros(x_shape, dtype=gout.dtype)
    iu, iv = np.divmod(arg, ksize)
    bi, ci, oi, oj = np.indices((b, c, ho, wo), sparse=False)
    np.add.at(gx, (bi, ci, oi * stride + iu, oj * stride + iv), gout)
    return gx


def avgpool2d_forward(x, ksize, stride):
    b, c, h, w = x.shape
    ho = (h - ksize) // stride + 1
    wo = (w - ksize) // stride + 1
    windows = sliding_window_view(x, (ksize, ksize), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(windows.mean(axis=(-2, -1)))


def avgpool2d_backward(x_shape, ksize, stride, gout):
    gx = np.zeros(x_shape, dtype=gout.dtype)
    share = gout / (ksize * ksize)
    _, _, ho, wo = gout.shape
    for u in range(ksize):
        for v in range(ksize):
            gx[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += share
    return gx
