"""Numpy implementations of the convolution and DFT kernels.

These are the fallback used when the compiled extension is unavailable and the
oracle the compiled kernels are tested against. All arrays are float64.
"""

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def dwconv2d_forward(x, k):
    """Depthwise 'same' cross-correlation. x: [B, D, H, W], k: [D, kh, kw]."""
    _, _, H, W = x.shape
    _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            y += xp[:, :, i:i + H, j:j + W] * k[None, :, i, j, None, None]
    return y


def dwconv2d_backward(x, k, gy):
    _, _, H, W = x.shape
    _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gxp = np.zeros_like(xp)
    gk = np.empty_like(k)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + H, j:j + W] += gy * k[None, :, i, j, None, None]
            gk[:, i, j] = np.einsum("bdhw,bdhw->d", gy, xp[:, :, i:i + H, j:j + W])
    return gxp[:, :, ph:ph + H, pw:pw + W].copy(), gk


def conv1d_out_len(L, K, stride, pad):
    return (L + 2 * pad - K) // stride + 1


def _windows(x, K, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    return sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]


def conv1d_forward(x, w, stride, pad):
    """Strided 1-D cross-correlation without bias. x: [N, Cin, L], w: [Cout, Cin, K]."""
    win = _windows(x, w.shape[2], stride, pad)  # N, Cin, Lout, K
    return np.einsum("nclk,ock->nol", win, w, optimize=True)


def conv1d_backward(x, w, gy, stride, pad):
    N, Cin, L = x.shape
    K = w.shape[2]
    Lout = gy.shape[2]
    win = _windows(x, K, stride, pad)
    gw = np.einsum("nol,nclk->ock", gy, win, optimize=True)
    gwin = np.einsum("nol,ock->nclk", gy, w, optimize=True)
    gxp = np.zeros((N, Cin, L + 2 * pad))
    for k in range(K):
        gxp[:, :, k:k + stride * (Lout - 1) + 1:stride] += gwin[..., k]
    return gxp[:, :, pad:pad + L].copy(), gw


@lru_cache(maxsize=16)
def dft_tables(t):
    n = np.arange(t)
    f = np.arange(t // 2 + 1)
    ang = 2.0 * np.pi * np.outer(f, n) / t
    return np.cos(ang), np.sin(ang)


def dft_magnitude(x):
    """Magnitude of the real DFT by direct summation. x: [N, t] -> [N, t//2 + 1]."""
    cos_t, sin_t = dft_tables(x.shape[1])
    re = x @ cos_t.T
    im = x @ sin_t.T
    return np.sqrt(re * re + im * im)
