"""NumPy fallback for the convolution kernel core.

Implements the same four entry points as the compiled extension
(`_convcore`), using im2col/col2im plus BLAS matmul. Results agree with the
compiled kernels to floating-point rounding; within one backend every call
is bit-deterministic.
"""

import numpy as np

BACKEND_NAME = "python"


def _im2col(xp, k, stride, out_h, out_w):
    # cols[b, ci, ky, kx, oy, ox] = xp[b, ci, oy*s + ky, ox*s + kx]
    b, ci, _, _ = xp.shape
    cols = np.empty((b, ci, k, k, out_h, out_w), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[
                :, :, ky : ky + stride * (out_h - 1) + 1 : stride,
                kx : kx + stride * (out_w - 1) + 1 : stride,
            ]
    return cols


def _col2im(cols, xp_shape, k, stride, out_h, out_w):
    # scatter-add inverse of _im2col
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            xp[
                :, :, ky : ky + stride * (out_h - 1) + 1 : stride,
                kx : kx + stride * (out_w - 1) + 1 : stride,
            ] += cols[:, :, ky, kx]
    return xp


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, b, stride, padding):
    bsz, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (wd + 2 * padding - k) // stride + 1
    xp = _pad(x, padding)
    cols = _im2col(xp, k, stride, out_h, out_w)
    cols2 = cols.reshape(bsz, ci * k * k, out_h * out_w)
    w2 = w.reshape(co, ci * k * k)
    out = np.matmul(w2[None, :, :], cols2).reshape(bsz, co, out_h, out_w)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(gout, x, w, stride, padding):
    bsz, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    _, _, out_h, out_w = gout.shape
    xp = _pad(x, padding)
    cols = _im2col(xp, k, stride, out_h, out_w)
    cols2 = cols.reshape(bsz, ci * k * k, out_h * out_w)
    g2 = gout.reshape(bsz, co, out_h * out_w)
    w2 = w.reshape(co, ci * k * k)

    dw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = gout.sum(axis=(0, 2, 3))
    dcols2 = np.matmul(w2.T[None, :, :], g2)
    dcols = dcols2.reshape(bsz, ci, k, k, out_h, out_w)
    dxp = _col2im(dcols, xp.shape, k, stride, out_h, out_w)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw, db


def tconv2d_forward(x, w, b, stride):
    bsz, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    out_h = (h - 1) * stride + k
    out_w = (wd - 1) * stride + k
    x2 = x.reshape(bsz, ci, h * wd)
    w2 = w.reshape(ci, co * k * k)
    tmp = np.matmul(w2.T[None, :, :], x2).reshape(bsz, co, k, k, h, wd)
    out = _col2im(tmp, (bsz, co, out_h, out_w), k, stride, h, wd)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def tconv2d_backward(gout, x, w, stride):
    bsz, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    cols = _im2col(gout, k, stride, h, wd)
    cols2 = cols.reshape(bsz, co * k * k, h * wd)
    x2 = x.reshape(bsz, ci, h * wd)
    w2 = w.reshape(ci, co * k * k)

    dx = np.matmul(w2[None, :, :], cols2).reshape(x.shape)
    dw = np.matmul(x2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = gout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db
