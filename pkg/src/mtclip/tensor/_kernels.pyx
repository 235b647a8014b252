# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same signatures and semantics as ``_fallback.py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((b, c * k * k, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oy in range(ho):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= w:
                                    continue
                                out[n, row, oy * wo + ox] = x[n, ch, iy, ix]
    return out_arr


def col2im(const double[:, :, ::1] cols, Py_ssize_t b, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oy in range(ho):
                            iy = oy * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + kj - pad
                                if ix < 0 or ix >= w:
                                    continue
                                out[n, ch, iy, ix] += cols[n, row, oy * wo + ox]
    return out_arr


def upsample_nearest(const double[:, :, :, ::1] x, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out_arr = np.empty((b, c, out_h, out_w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, y, xx, sy
    with nogil:
        for n in range(b):
            for ch in range(c):
                for y in range(out_h):
                    sy = (y * h) // out_h
                    for xx in range(out_w):
                        out[n, ch, y, xx] = x[n, ch, sy, (xx * w) // out_w]
    return out_arr


def upsample_nearest_backward(const double[:, :, :, ::1] g, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], out_h = g.shape[2], out_w = g.shape[3]
    out_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, y, xx, sy
    with nogil:
        for n in range(b):
            for ch in range(c):
                for y in range(out_h):
                    sy = (y * h) // out_h
                    for xx in range(out_w):
                        out[n, ch, sy, (xx * w) // out_w] += g[n, ch, y, xx]
    return out_arr


def adaptive_avg_pool(const double[:, :, :, ::1] x, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out_arr = np.zeros((b, c, out_h, out_w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, oy, ox, y0, y1, x0, x1, y, xx
    cdef double acc
    with nogil:
        for n in range(b):
            for ch in range(c):
                for oy in range(out_h):
                    y0 = (oy * h) // out_h
                    y1 = ((oy + 1) * h) // out_h
                    for ox in range(out_w):
                        x0 = (ox * w) // out_w
                        x1 = ((ox + 1) * w) // out_w
                        acc = 0.0
                        for y in range(y0, y1):
                            for xx in range(x0, x1):
                                acc += x[n, ch, y, xx]
                        out[n, ch, oy, ox] = acc / ((y1 - y0) * (x1 - x0))
    return out_arr


def adaptive_avg_pool_backward(const double[:, :, :, ::1] g, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], out_h = g.shape[2], out_w = g.shape[3]
    out_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, oy, ox, y0, y1, x0, x1, y, xx
    cdef double share
    with nogil:
        for n in range(b):
            for ch in range(c):
                for oy in range(out_h):
                    y0 = (oy * h) // out_h
                    y1 = ((oy + 1) * h) // out_h
                    for ox in range(out_w):
                        x0 = (ox * w) // out_w
                        x1 = ((ox + 1) * w) // out_w
                        share = g[n, ch, oy, ox] / ((y1 - y0) * (x1 - x0))
                        for y in range(y0, y1):
                            for xx in range(x0, x1):
                                out[n, ch, y, xx] += share
    return out_arr


def softmax_xent_nchw(const double[:, :, :, ::1] logits, const cnp.int64_t[:, :, ::1] target,
                      cnp.int64_t ignore_id):
    cdef Py_ssize_t b = logits.shape[0], c = logits.shape[1], h = logits.shape[2], w = logits.shape[3]
    grad_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] grad = grad_arr
    cdef Py_ssize_t n, ch, y, xx, count = 0
    cdef cnp.int64_t t
    cdef double mx, denom, loss_sum = 0.0, e
    with nogil:
        for n in range(b):
            for y in range(h):
                for xx in range(w):
                    t = target[n, y, xx]
                    if t == ignore_id:
                        continue
                    mx = logits[n, 0, y, xx]
                    for ch in range(1, c):
                        if logits[n, ch, y, xx] > mx:
                            mx = logits[n, ch, y, xx]
                    denom = 0.0
                    for ch in range(c):
                        e = exp(logits[n, ch, y, xx] - mx)
                        grad[n, ch, y, xx] = e
                        denom += e
                    for ch in range(c):
                        grad[n, ch, y, xx] = grad[n, ch, y, xx] / denom
                    grad[n, t, y, xx] -= 1.0
                    loss_sum += log(denom) - (logits[n, t, y, xx] - mx)
                    count += 1
    return loss_sum, count, grad_arr


def gelu(const double[::1] x, bint want_grad):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double c = 0.7978845608028654, a = 0.044715, v, v2, t
    out_arr = np.empty(n, dtype=np.float64)
    deriv_arr = np.empty(n if want_grad else 0, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] deriv = deriv_arr
    with nogil:
        for i in range(n):
            v = x[i]
            v2 = v * v
            t = tanh(c * (v + a * v2 * v))
            out[i] = 0.5 * v * (1.0 + t)
            if want_grad:
                deriv[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v2)
    return out_arr, (deriv_arr if want_grad else None)


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain, const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    inv_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef double mu, var, diff, r
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu = mu + x[i, j]
            mu = mu / d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mu
                var = var + diff * diff
            r = 1.0 / sqrt(var / d + eps)
            inv[i] = r
            for j in range(d):
                xhat[i, j] = (x[i, j] - mu) * r
                out[i, j] = xhat[i, j] * gain[j] + bias[j]
    return out_arr, xhat_arr, inv_arr


def layer_norm_backward(const double[:, ::1] g, const double[:, ::1] xhat, const double[::1] inv,
                        const double[::1] gain):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    gx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double s1, s2, gh
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                gh = g[i, j] * gain[j]
                s1 = s1 + gh
                s2 = s2 + gh * xhat[i, j]
            for j in range(d):
                gh = g[i, j] * gain[j]
                gx[i, j] = inv[i] / d * (d * gh - s1 - xhat[i, j] * s2)
    return gx_arr
