# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels: tight im2col/col2im loops + BLAS GEMM.

Same contracts as ``pykernels``; selected at import by ``soi._kernels``.
"""

import numpy as np

cimport cython
from scipy.linalg.cython_blas cimport dgemm, sgemm

NAME = "native"

ctypedef fused floating:
    float
    double


cdef void _gemm_nn(floating *a, floating *b, floating *c,
                   int m, int k, int n) noexcept nogil:
    # Row-major C(m,n) = A(m,k) @ B(k,n), computed as column-major C^T = B^T A^T.
    cdef char nt = b'N'
    cdef floating one = 1.0
    cdef floating zero = 0.0
    if floating is float:
        sgemm(&nt, &nt, &n, &m, &k, &one, <float *> b, &n, <float *> a, &k,
              &zero, <float *> c, &n)
    else:
        dgemm(&nt, &nt, &n, &m, &k, &one, <double *> b, &n, <double *> a, &k,
              &zero, <double *> c, &n)


cdef void _gemm_tn(floating *a, floating *b, floating *c,
                   int m, int k, int n) noexcept nogil:
    # Row-major C(m,n) = A(k,m)^T @ B(k,n).
    cdef char nt = b'N'
    cdef char tt = b'T'
    cdef floating one = 1.0
    cdef floating zero = 0.0
    if floating is float:
        sgemm(&nt, &tt, &n, &m, &k, &one, <float *> b, &n, <float *> a, &m,
              &zero, <float *> c, &n)
    else:
        dgemm(&nt, &tt, &n, &m, &k, &one, <double *> b, &n, <double *> a, &m,
              &zero, <double *> c, &n)


cdef void _im2col(floating[:, :, :, ::1] xp, floating[:, ::1] cols,
                  int kh, int kw, int stride, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t b, c, i, j, u, v, row, col
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    for b in range(nb):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                for c in range(nc):
                    for u in range(kh):
                        col = (c * kh + u) * kw
                        for v in range(kw):
                            cols[row, col + v] = xp[b, c, i * stride + u, j * stride + v]


cdef void _col2im(floating[:, ::1] cols, floating[:, :, :, ::1] gxp,
                  int kh, int kw, int stride, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t b, c, i, j, u, v, row, col
    cdef Py_ssize_t nb = gxp.shape[0], nc = gxp.shape[1]
    for b in range(nb):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                for c in range(nc):
                    for u in range(kh):
                        col = (c * kh + u) * kw
                        for v in range(kw):
                            gxp[b, c, i * stride + u, j * stride + v] += cols[row, col + v]


def _pad(x, int padding):
    if padding:
        return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return np.ascontiguousarray(x)


def _fwd(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
         int stride, int ho, int wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef int f = <int> w.shape[0]
    cdef int kh = <int> w.shape[2], kw = <int> w.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    cols_arr = np.empty((b * ho * wo, c * kh * kw), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    wt_arr = np.ascontiguousarray(np.asarray(w).reshape(f, -1).T)
    out_arr = np.empty((b * ho * wo, f), dtype=dtype)
    cdef floating[:, ::1] wt = wt_arr
    cdef floating[:, ::1] out2 = out_arr
    cdef int m = <int> (b * ho * wo), k = <int> (c * kh * kw), n = f
    with nogil:
        _im2col(xp, cols, kh, kw, stride, ho, wo)
        _gemm_nn(&cols[0, 0], &wt[0, 0], &out2[0, 0], m, k, n)
    return np.ascontiguousarray(out_arr.reshape(b, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_forward(x, w, stride, padding):
    """Cross-correlate x (B,C,H,W) with w (F,C,kh,kw); returns (B,F,Ho,Wo)."""
    kh, kw = w.shape[2], w.shape[3]
    ho = (x.shape[2] + 2 * padding - kh) // stride + 1
    wo = (x.shape[3] + 2 * padding - kw) // stride + 1
    return _fwd(_pad(x, padding), np.ascontiguousarray(w), stride, ho, wo)


def _bwd(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
         floating[:, :, :, ::1] gout, int stride, int padding, int h, int wd,
         bint need_gx, bint need_gw):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef int f = <int> w.shape[0]
    cdef int kh = <int> w.shape[2], kw = <int> w.shape[3]
    cdef int ho = <int> gout.shape[2], wo = <int> gout.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64

    g2_arr = np.ascontiguousarray(np.asarray(gout).transpose(0, 2, 3, 1)).reshape(b * ho * wo, f)
    cdef floating[:, ::1] g2 = g2_arr
    cdef floating[:, ::1] cols
    cdef floating[:, ::1] gw2
    cdef floating[:, ::1] wmat
    cdef floating[:, ::1] gcols
    cdef floating[:, :, :, ::1] gxp
    cdef int m = <int> (b * ho * wo), k = <int> (c * kh * kw)

    gw_out = None
    if need_gw:
        cols_arr = np.empty((b * ho * wo, c * kh * kw), dtype=dtype)
        gw_arr = np.empty((f, c * kh * kw), dtype=dtype)
        cols = cols_arr
        gw2 = gw_arr
        with nogil:
            _im2col(xp, cols, kh, kw, stride, ho, wo)
            _gemm_tn(&g2[0, 0], &cols[0, 0], &gw2[0, 0], f, m, k)
        gw_out = gw_arr.reshape(f, c, kh, kw)

    gx_out = None
    if need_gx:
        wmat_arr = np.ascontiguousarray(np.asarray(w).reshape(f, -1))
        gcols_arr = np.empty((b * ho * wo, c * kh * kw), dtype=dtype)
        gxp_arr = np.zeros((b, c, xp.shape[2], xp.shape[3]), dtype=dtype)
        wmat = wmat_arr
        gcols = gcols_arr
        gxp = gxp_arr
        with nogil:
            _gemm_nn(&g2[0, 0], &wmat[0, 0], &gcols[0, 0], m, f, k)
            _col2im(gcols, gxp, kh, kw, stride, ho, wo)
        if padding:
            gx_out = np.ascontiguousarray(gxp_arr[:, :, padding:padding + h, padding:padding + wd])
        else:
            gx_out = gxp_arr
    return gx_out, gw_out


def conv2d_backward(x, w, stride, padding, gout, need_gx=True, need_gw=True):
    """Gradients of conv2d_forward w.r.t. input and kernel."""
    return _bwd(
        _pad(x, padding),
        np.ascontiguousarray(w),
        np.ascontiguousarray(gout),
        stride,
        padding,
        x.shape[2],
        x.shape[3],
        need_gx,
        need_gw,
    )


# Pooling stays on the numpy path: it is a negligible share of runtime.
from soi._kernels.pykernels import (  # noqa: E402  (re-export for a uniform surface)
    avgpool2d_backward,
    avgpool2d_forward,
    maxpool2d_backward,
    maxpool2d_forward,
)
