"""Vectorised numpy fallbacks for the numba kernels."""

import numpy as np


def _bit_reverse(n):
    levels = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(levels):
        rev = (rev << 1) | (idx & 1)
        idx = idx >> 1
    return rev


def fft_radix2(x, inverse):
    rows, n = x.shape
    sign = 1.0 if inverse else -1.0
    a = x[:, _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        a = a.reshape(rows, n // size, size)
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(rows, n)


def dft_naive(x, inverse):
    n = x.shape[1]
    sign = 1.0 if inverse else -1.0
    kt = np.outer(np.arange(n), np.arange(n)) % n
    mat = np.exp(sign * 2j * np.pi * kt / n)
    return x @ mat.T


def _im2col(x, kw):
    # (n, width, cin) -> (n * width, kw * cin), zero-padded taps
    n, width, cin = x.shape
    pad = kw // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    cols = np.stack([xp[:, k:k + width] for k in range(kw)], axis=2)
    return cols.reshape(n * width, kw * cin)


def _weight_matrix(w):
    cout, cin, kw = w.shape
    return w.transpose(2, 1, 0).reshape(kw * cin, cout)


def conv1d_forward(x, w, b):
    n, width, _ = x.shape
    y = _im2col(x, w.shape[2]) @ _weight_matrix(w) + b
    return y.reshape(n, width, w.shape[0])


def conv1d_backward(x, w, gy):
    n, width, cin = x.shape
    cout, _, kw = w.shape
    pad = kw // 2
    g2 = gy.reshape(n * width, cout)
    gw = (_im2col(x, kw).T @ g2).reshape(kw, cin, cout).transpose(2, 1, 0)
    gb = g2.sum(axis=0)
    gcols = (g2 @ _weight_matrix(w).T).reshape(n, width, kw, cin)
    gxp = np.zeros((n, width + 2 * pad, cin))
    for k in range(kw):
        gxp[:, k:k + width] += gcols[:, :, k]
    return gxp[:, pad:pad + width], gw, gb


def gelu_forward(x):
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return x * cdf, cdf + x * pdf


def chebyshev_basis(x, order):
    out = np.empty((order + 1,) + x.shape)
    out[0] = 1.0
    if order >= 1:
        out[1] = x
    for m in range(1, order):
        out[m + 1] = 2.0 * x * out[m] - out[m - 1]
    return out


def _basis_and_derivative(x, order):
    t = chebyshev_basis(x, order)
    d = np.zeros_like(t)
    if order >= 1:
        d[1] = 1.0
    for m in range(1, order):
        d[m + 1] = 2.0 * t[m] + 2.0 * x * d[m] - d[m - 1]
    return t, d


def chebyshev_forward(xh, coef):
    t = chebyshev_basis(xh, coef.shape[0] - 1)
    return np.einsum("mbn,mn->bn", t, coef)


def chebyshev_backward(xh, coef, gy):
    t, d = _basis_and_derivative(xh, coef.shape[0] - 1)
    gc = np.einsum("bn,mbn->mn", gy, t)
    gx = gy * np.einsum("mbn,mn->bn", d, coef)
    return gx, gc
