"""Backend dispatch for the hot kernels.

The backend is resolved on every call so tests can flip
``CHANNELKAN_BACKEND`` without reimporting.
"""

import numpy as np

from channelkan._backend import NUMBA_AVAILABLE, use_numba
from channelkan.numerics import _kernels_numpy

if NUMBA_AVAILABLE:
    from channelkan.numerics import _kernels_numba
else:  # pragma: no cover
    _kernels_numba = _kernels_numpy


def _impl():
    return _kernels_numba if use_numba() else _kernels_numpy


def fft_radix2(x, inverse=False):
    """Unnormalised radix-2 DFT along the last axis of a 2-D complex array."""
    return _impl().fft_radix2(np.ascontiguousarray(x, dtype=np.complex128), bool(inverse))


def dft_naive(x, inverse=False):
    return _impl().dft_naive(np.ascontiguousarray(x, dtype=np.complex128), bool(inverse))


def conv1d_forward(x, w, b):
    return _impl().conv1d_forward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
    )


def conv1d_backward(x, w, gy):
    return _impl().conv1d_backward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(gy, dtype=np.float64),
    )


def gelu_forward(x):
    """GELU values and derivatives in one pass."""
    return _impl().gelu_forward(np.ascontiguousarray(x, dtype=np.float64))


def chebyshev_basis(x, order):
    x = np.ascontiguousarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    return _impl().chebyshev_basis(flat, int(order)).reshape((order + 1,) + x.shape)


def chebyshev_forward(xh, coef):
    return _impl().chebyshev_forward(
        np.ascontiguousarray(xh, dtype=np.float64), np.ascontiguousarray(coef, dtype=np.float64)
    )


def chebyshev_backward(xh, coef, gy):
    return _impl().chebyshev_backward(
        np.ascontiguousarray(xh, dtype=np.float64),
        np.ascontiguousarray(coef, dtype=np.float64),
        np.ascontiguousarray(gy, dtype=np.float64),
    )
