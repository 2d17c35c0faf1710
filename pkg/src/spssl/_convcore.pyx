# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernel core.

conv / transposed-conv forward and backward for float32 and float64 through
one GEMM per batch item: the patch matrix is packed by tight C loops and the
contraction goes straight to BLAS, skipping the temporary views, fancy
indexing, and slice-accumulate passes the numpy fallback pays for. Results
match `_convpy` to rounding error.
"""

import numpy as np

cimport cython
from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm

BACKEND_NAME = "compiled"


def _pad(x, int padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


cdef void _gemm_rm(char ta, char tb, floating *a, floating *b, floating *c,
                   int m, int n, int k, floating alpha, floating beta) noexcept nogil:
    """C[m,n] (row-major) = alpha * opA(A) @ opB(B) + beta * C.

    Row-major GEMM via the transpose identity: a row-major matrix is its own
    transpose in column-major, so compute C^T = opB(B)^T @ opA(A)^T.
    """
    cdef int lda = k if ta == c'N' else m
    cdef int ldb = n if tb == c'N' else k
    if floating is float:
        sgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &n)
    else:
        dgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &n)


cdef void _im2col(floating[:, :, :, ::1] xp, Py_ssize_t b, Py_ssize_t K,
                  int stride, Py_ssize_t Ho, Py_ssize_t Wo,
                  floating[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t C = xp.shape[1]
    cdef Py_ssize_t c, ky, kx, oy, ox, row
    cdef const floating *src
    cdef floating *dst
    for c in range(C):
        for ky in range(K):
            for kx in range(K):
                row = (c * K + ky) * K + kx
                for oy in range(Ho):
                    src = &xp[b, c, oy * stride + ky, kx]
                    dst = &cols[row, oy * Wo]
                    if stride == 1:
                        for ox in range(Wo):
                            dst[ox] = src[ox]
                    else:
                        for ox in range(Wo):
                            dst[ox] = src[ox * stride]


cdef void _col2im(floating[:, ::1] cols, Py_ssize_t b, Py_ssize_t K,
                  int stride, Py_ssize_t Ho, Py_ssize_t Wo,
                  floating[:, :, :, ::1] xp) noexcept nogil:
    cdef Py_ssize_t C = xp.shape[1]
    cdef Py_ssize_t c, ky, kx, oy, ox, row
    cdef const floating *src
    cdef floating *dst
    for c in range(C):
        for ky in range(K):
            for kx in range(K):
                row = (c * K + ky) * K + kx
                for oy in range(Ho):
                    src = &cols[row, oy * Wo]
                    dst = &xp[b, c, oy * stride + ky, kx]
                    if stride == 1:
                        for ox in range(Wo):
                            dst[ox] += src[ox]
                    else:
                        for ox in range(Wo):
                            dst[ox * stride] += src[ox]


def conv2d_forward(x, w, b, int stride, int padding):
    cdef Py_ssize_t K = w.shape[2]
    xp = _pad(x, padding)
    cdef Py_ssize_t B = xp.shape[0], Ci = xp.shape[1], Co = w.shape[0]
    cdef Py_ssize_t Ho = (xp.shape[2] - K) // stride + 1
    cdef Py_ssize_t Wo = (xp.shape[3] - K) // stride + 1
    w2 = np.ascontiguousarray(w.reshape(Co, Ci * K * K))
    out = np.empty((B, Co, Ho, Wo), dtype=x.dtype)
    cols = np.empty((Ci * K * K, Ho * Wo), dtype=x.dtype)

    if x.dtype == np.float32:
        _conv_fwd[cython.float](xp, w2, out, cols, stride, K)
    else:
        _conv_fwd[cython.double](xp, w2, out, cols, stride, K)
    out += b[None, :, None, None]
    return out


cdef void _conv_fwd(floating[:, :, :, ::1] xp, floating[:, ::1] w2,
                    floating[:, :, :, ::1] out, floating[:, ::1] cols,
                    int stride, Py_ssize_t K):
    cdef Py_ssize_t B = xp.shape[0]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef int m = <int> w2.shape[0]
    cdef int kk = <int> w2.shape[1]
    cdef int n = <int> (Ho * Wo)
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _im2col(xp, b, K, stride, Ho, Wo, cols)
            _gemm_rm(c'N', c'N', &w2[0, 0], &cols[0, 0], &out[b, 0, 0, 0],
                     m, n, kk, <floating> 1, <floating> 0)


def conv2d_backward(gout, x, w, int stride, int padding):
    cdef Py_ssize_t K = w.shape[2]
    xp = _pad(x, padding)
    gout = np.ascontiguousarray(gout)
    cdef Py_ssize_t B = xp.shape[0], Ci = xp.shape[1], Co = w.shape[0]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    w2 = np.ascontiguousarray(w.reshape(Co, Ci * K * K))
    dxp = np.zeros_like(xp)
    dw2 = np.zeros_like(w2)
    cols = np.empty((Ci * K * K, Ho * Wo), dtype=x.dtype)
    dcols = np.empty_like(cols)
    if x.dtype == np.float32:
        _conv_bwd[cython.float](gout, xp, w2, dxp, dw2, cols, dcols, stride, K)
    else:
        _conv_bwd[cython.double](gout, xp, w2, dxp, dw2, cols, dcols, stride, K)
    db = gout.sum(axis=(0, 2, 3))
    if padding:
        dxp = np.ascontiguousarray(dxp[:, :, padding:-padding, padding:-padding])
    return dxp, dw2.reshape(w.shape), db


cdef void _conv_bwd(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] xp,
                    floating[:, ::1] w2, floating[:, :, :, ::1] dxp,
                    floating[:, ::1] dw2, floating[:, ::1] cols,
                    floating[:, ::1] dcols, int stride, Py_ssize_t K):
    cdef Py_ssize_t B = xp.shape[0]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cdef int m = <int> w2.shape[0]
    cdef int kk = <int> w2.shape[1]
    cdef int n = <int> (Ho * Wo)
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _im2col(xp, b, K, stride, Ho, Wo, cols)
            # dw2 += gout_b @ cols^T
            _gemm_rm(c'N', c'T', &gout[b, 0, 0, 0], &cols[0, 0], &dw2[0, 0],
                     m, kk, n, <floating> 1, <floating> 1)
            # dcols = w2^T @ gout_b, scattered back through col2im
            _gemm_rm(c'T', c'N', &w2[0, 0], &gout[b, 0, 0, 0], &dcols[0, 0],
                     kk, n, m, <floating> 1, <floating> 0)
            _col2im(dcols, b, K, stride, Ho, Wo, dxp)


def tconv2d_forward(x, w, b, int stride):
    cdef Py_ssize_t K = w.shape[2]
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], Co = w.shape[1]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    w2 = np.ascontiguousarray(w.reshape(Ci, Co * K * K))
    out = np.zeros((B, Co, (H - 1) * stride + K, (W - 1) * stride + K),
                   dtype=x.dtype)
    cols = np.empty((Co * K * K, H * W), dtype=x.dtype)
    if x.dtype == np.float32:
        _tconv_fwd[cython.float](x, w2, out, cols, stride, K)
    else:
        _tconv_fwd[cython.double](x, w2, out, cols, stride, K)
    out += b[None, :, None, None]
    return out


cdef void _tconv_fwd(floating[:, :, :, ::1] x, floating[:, ::1] w2,
                     floating[:, :, :, ::1] out, floating[:, ::1] cols,
                     int stride, Py_ssize_t K):
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef int ci = <int> w2.shape[0]
    cdef int kk = <int> w2.shape[1]
    cdef int n = <int> (H * W)
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            # cols = w2^T @ x_b, then scatter-add like a stride-s col2im
            _gemm_rm(c'T', c'N', &w2[0, 0], &x[b, 0, 0, 0], &cols[0, 0],
                     kk, n, ci, <floating> 1, <floating> 0)
            _col2im(cols, b, K, stride, H, W, out)


def tconv2d_backward(gout, x, w, int stride):
    cdef Py_ssize_t K = w.shape[2]
    gout = np.ascontiguousarray(gout)
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], Co = w.shape[1]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    w2 = np.ascontiguousarray(w.reshape(Ci, Co * K * K))
    dx = np.empty_like(x)
    dw2 = np.zeros_like(w2)
    gcols = np.empty((Co * K * K, H * W), dtype=x.dtype)
    if x.dtype == np.float32:
        _tconv_bwd[cython.float](gout, x, w2, dx, dw2, gcols, stride, K)
    else:
        _tconv_bwd[cython.double](gout, x, w2, dx, dw2, gcols, stride, K)
    db = gout.sum(axis=(0, 2, 3))
    return dx, dw2.reshape(w.shape), db


cdef void _tconv_bwd(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] x,
                     floating[:, ::1] w2, floating[:, :, :, ::1] dx,
                     floating[:, ::1] dw2, floating[:, ::1] gcols,
                     int stride, Py_ssize_t K):
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef int ci = <int> w2.shape[0]
    cdef int kk = <int> w2.shape[1]
    cdef int n = <int> (H * W)
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _im2col(gout, b, K, stride, H, W, gcols)
            # dx_b = w2 @ gcols
            _gemm_rm(c'N', c'N', &w2[0, 0], &gcols[0, 0], &dx[b, 0, 0, 0],
                     ci, n, kk, <floating> 1, <floating> 0)
            # dw2 += x_b @ gcols^T
            _gemm_rm(c'N', c'T', &x[b, 0, 0, 0], &gcols[0, 0], &dw2[0, 0],
                     ci, kk, n, <floating> 1, <floating> 1)
