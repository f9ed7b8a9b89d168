"""numba kernels. Signatures mirror ``_kernels_numpy`` one to one."""

import math

import numpy as np

from channelkan._backend import njit


@njit(cache=True)
def _bit_reverse(n):
    levels = 0
    while (1 << levels) < n:
        levels += 1
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        r = 0
        v = i
        for _ in range(levels):
            r = (r << 1) | (v & 1)
            v >>= 1
        out[i] = r
    return out


@njit(cache=True)
def fft_radix2(x, inverse):
    rows, n = x.shape
    sign = 1.0 if inverse else -1.0
    rev = _bit_reverse(n)
    out = np.empty_like(x)
    for r in range(rows):
        for i in range(n):
            out[r, i] = x[r, rev[i]]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.empty(half, dtype=np.complex128)
        for j in range(half):
            ang = sign * 2.0 * math.pi * j / size
            tw[j] = complex(math.cos(ang), math.sin(ang))
        for r in range(rows):
            for start in range(0, n, size):
                for j in range(half):
                    e = out[r, start + j]
                    o = out[r, start + j + half] * tw[j]
                    out[r, start + j] = e + o
                    out[r, start + j + half] = e - o
        size *= 2
    return out


@njit(cache=True)
def dft_naive(x, inverse):
    rows, n = x.shape
    sign = 1.0 if inverse else -1.0
    tw = np.empty(n, dtype=np.complex128)
    for j in range(n):
        ang = sign * 2.0 * math.pi * j / n
        tw[j] = complex(math.cos(ang), math.sin(ang))
    out = np.zeros_like(x)
    for r in range(rows):
        for k in range(n):
            acc = 0j
            for t in range(n):
                acc += x[r, t] * tw[(k * t) % n]
            out[r, k] = acc
    return out


@njit(cache=True)
def _im2col(x, kw):
    n, width, cin = x.shape
    pad = kw // 2
    cols = np.zeros((n * width, kw * cin))
    for s in range(n):
        for p in range(width):
            r = s * width + p
            for k in range(kw):
                q = p + k - pad
                if 0 <= q < width:
                    for i in range(cin):
                        cols[r, k * cin + i] = x[s, q, i]
    return cols


@njit(cache=True)
def _weight_matrix(w):
    cout, cin, kw = w.shape
    wm = np.empty((kw * cin, cout))
    for o in range(cout):
        for i in range(cin):
            for k in range(kw):
                wm[k * cin + i, o] = w[o, i, k]
    return wm


@njit(cache=True)
def conv1d_forward(x, w, b):
    n, width, _ = x.shape
    cout = w.shape[0]
    y = np.dot(_im2col(x, w.shape[2]), _weight_matrix(w))
    for r in range(n * width):
        for o in range(cout):
            y[r, o] += b[o]
    return y.reshape(n, width, cout)


@njit(cache=True)
def conv1d_backward(x, w, gy):
    n, width, cin = x.shape
    cout, _, kw = w.shape
    pad = kw // 2
    g2 = np.ascontiguousarray(gy).reshape(n * width, cout)
    cols = _im2col(x, kw)
    gwm = np.dot(cols.T, g2)
    gw = np.empty_like(w)
    for o in range(cout):
        for i in range(cin):
            for k in range(kw):
                gw[o, i, k] = gwm[k * cin + i, o]
    gb = np.zeros(cout)
    for r in range(n * width):
        for o in range(cout):
            gb[o] += g2[r, o]
    gcols = np.dot(g2, _weight_matrix(w).T)
    gx = np.zeros_like(x)
    for s in range(n):
        for p in range(width):
            r = s * width + p
            for k in range(kw):
                q = p + k - pad
                if 0 <= q < width:
                    for i in range(cin):
                        gx[s, q, i] += gcols[r, k * cin + i]
    return gx, gw, gb


@njit(cache=True)
def gelu_forward(x):
    flat = x.reshape(-1)
    y = np.empty_like(flat)
    dy = np.empty_like(flat)
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    inv_sqrt2pi = 1.0 / math.sqrt(2.0 * math.pi)
    for j in range(flat.shape[0]):
        v = flat[j]
        cdf = 0.5 * (1.0 + math.erf(v * inv_sqrt2))
        y[j] = v * cdf
        dy[j] = cdf + v * inv_sqrt2pi * math.exp(-0.5 * v * v)
    return y.reshape(x.shape), dy.reshape(x.shape)


@njit(cache=True)
def chebyshev_basis(x, order):
    n = x.shape[0]
    out = np.empty((order + 1, n))
    for j in range(n):
        out[0, j] = 1.0
        if order >= 1:
            out[1, j] = x[j]
        for m in range(1, order):
            out[m + 1, j] = 2.0 * x[j] * out[m, j] - out[m - 1, j]
    return out


@njit(cache=True)
def chebyshev_forward(xh, coef):
    batch, n = xh.shape
    order = coef.shape[0] - 1
    y = np.empty((batch, n))
    for s in range(batch):
        for j in range(n):
            x = xh[s, j]
            t_prev = 1.0
            acc = coef[0, j]
            if order >= 1:
                t_cur = x
                acc += coef[1, j] * t_cur
                for m in range(1, order):
                    t_next = 2.0 * x * t_cur - t_prev
                    t_prev = t_cur
                    t_cur = t_next
                    acc += coef[m + 1, j] * t_cur
            y[s, j] = acc
    return y


@njit(cache=True)
def chebyshev_backward(xh, coef, gy):
    batch, n = xh.shape
    order = coef.shape[0] - 1
    gx = np.zeros((batch, n))
    gc = np.zeros_like(coef)
    for s in range(batch):
        for j in range(n):
            g = gy[s, j]
            x = xh[s, j]
            gc[0, j] += g
            if order < 1:
                continue
            # T_m and dT_m/dx advanced together
            t_prev, t_cur = 1.0, x
            d_prev, d_cur = 0.0, 1.0
            gc[1, j] += g * t_cur
            dx = coef[1, j] * d_cur
            for m in range(1, order):
                t_next = 2.0 * x * t_cur - t_prev
                d_next = 2.0 * t_cur + 2.0 * x * d_cur - d_prev
                t_prev, t_cur = t_cur, t_next
                d_prev, d_cur = d_cur, d_next
                gc[m + 1, j] += g * t_cur
                dx += coef[m + 1, j] * d_cur
            gx[s, j] = g * dx
    return gx, gc
