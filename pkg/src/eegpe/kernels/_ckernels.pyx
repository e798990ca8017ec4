# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and DFT kernels.

Same signatures and semantics as ``eegpe.kernels._reference``. Inputs must be
C-contiguous float64 arrays; the dispatcher in ``eegpe.kernels`` guarantees it.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, cos, sin, M_PI

cnp.import_array()


def dwconv2d_forward(const double[:, :, :, ::1] x, const double[:, :, ::1] k):
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = k.shape[1], kw = k.shape[2]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    out = np.zeros((B, D, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, d, h, w, i, j, hh, ww
    cdef double acc
    with nogil:
        for b in range(B):
            for d in range(D):
                for h in range(H):
                    for w in range(W):
                        acc = 0.0
                        for i in range(kh):
                            hh = h + i - ph
                            if hh < 0 or hh >= H:
                                continue
                            for j in range(kw):
                                ww = w + j - pw
                                if ww < 0 or ww >= W:
                                    continue
                                acc = acc + x[b, d, hh, ww] * k[d, i, j]
                        y[b, d, h, w] = acc
    return out


def dwconv2d_backward(const double[:, :, :, ::1] x, const double[:, :, ::1] k,
                      const double[:, :, :, ::1] gy):
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = k.shape[1], kw = k.shape[2]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    gx_arr = np.zeros((B, D, H, W), dtype=np.float64)
    gk_arr = np.zeros((D, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, d, h, w, i, j, hh, ww
    cdef double g
    with nogil:
        for b in range(B):
            for d in range(D):
                for h in range(H):
                    for w in range(W):
                        g = gy[b, d, h, w]
                        for i in range(kh):
                            hh = h + i - ph
                            if hh < 0 or hh >= H:
                                continue
                            for j in range(kw):
                                ww = w + j - pw
                                if ww < 0 or ww >= W:
                                    continue
                                gx[b, d, hh, ww] += g * k[d, i, j]
                                gk[d, i, j] += g * x[b, d, hh, ww]
    return gx_arr, gk_arr


def conv1d_forward(const double[:, :, ::1] x, const double[:, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Lout = (L + 2 * pad - K) // stride + 1
    out = np.zeros((N, Cout, Lout), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    cdef Py_ssize_t n, o, c, l, kk, src
    cdef double acc
    with nogil:
        for n in range(N):
            for o in range(Cout):
                for l in range(Lout):
                    acc = 0.0
                    for c in range(Cin):
                        for kk in range(K):
                            src = l * stride + kk - pad
                            if src < 0 or src >= L:
                                continue
                            acc = acc + x[n, c, src] * w[o, c, kk]
                    y[n, o, l] = acc
    return out


def conv1d_backward(const double[:, :, ::1] x, const double[:, :, ::1] w,
                    const double[:, :, ::1] gy, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Lout = gy.shape[2]
    gx_arr = np.zeros((N, Cin, L), dtype=np.float64)
    gw_arr = np.zeros((Cout, Cin, K), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t n, o, c, l, kk, src
    cdef double g
    with nogil:
        for n in range(N):
            for o in range(Cout):
                for l in range(Lout):
                    g = gy[n, o, l]
                    for c in range(Cin):
                        for kk in range(K):
                            src = l * stride + kk - pad
                            if src < 0 or src >= L:
                                continue
                            gx[n, c, src] += g * w[o, c, kk]
                            gw[o, c, kk] += g * x[n, c, src]
    return gx_arr, gw_arr


def dft_magnitude(const double[:, ::1] x):
    cdef Py_ssize_t N = x.shape[0], t = x.shape[1]
    cdef Py_ssize_t F = t // 2 + 1
    out = np.empty((N, F), dtype=np.float64)
    cdef double[:, ::1] y = out
    tab_c = np.empty(t, dtype=np.float64)
    tab_s = np.empty(t, dtype=np.float64)
    cdef double[::1] ct = tab_c
    cdef double[::1] st = tab_s
    cdef Py_ssize_t n, f, m
    cdef double re, im, v
    for m in range(t):
        ct[m] = cos(2.0 * M_PI * m / t)
        st[m] = sin(2.0 * M_PI * m / t)
    with nogil:
        for n in range(N):
            for f in range(F):
                re = 0.0
                im = 0.0
                for m in range(t):
                    v = x[n, m]
                    # (f * m) mod t indexes the shared twiddle table
                    re = re + v * ct[(f * m) % t]
                    im = im + v * st[(f * m) % t]
                y[n, f] = sqrt(re * re + im * im)
    return out
