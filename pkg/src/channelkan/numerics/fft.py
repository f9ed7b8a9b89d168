"""Unitary discrete Fourier transforms.

Every transform here is scaled by ``1/sqrt(n)`` in both directions, so
forward followed by inverse is the identity and Euclidean norms are
preserved. Power-of-two lengths take the radix-2 path; anything else falls
back to the O(n^2) direct sum.
"""

import numpy as np

from channelkan.errors import DimensionError
from channelkan.numerics import kernels


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d input")
    return axis % ndim


def _unnormalized(rows: np.ndarray, inverse: bool) -> np.ndarray:
    n = rows.shape[1]
    if n == 1:
        return rows.astype(np.complex128, copy=True)
    if is_power_of_two(n):
        return kernels.fft_radix2(rows, inverse)
    return kernels.dft_naive(rows, inverse)


def dft(x, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Unitary (inverse) DFT of ``x`` along ``axis``."""
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim == 0:
        raise DimensionError("dft needs at least a 1-d input")
    axis = _normalize_axis(axis, x.ndim)
    n = x.shape[axis]
    if n < 1:
        raise DimensionError("transform length must be >= 1")
    moved = np.moveaxis(x, axis, -1)
    lead = moved.shape[:-1]
    out = _unnormalized(moved.reshape(-1, n), inverse) / np.sqrt(n)
    return np.moveaxis(out.reshape(lead + (n,)), -1, axis)


def idft(x, axis: int = -1) -> np.ndarray:
    return dft(x, axis=axis, inverse=True)


def rfft(z, axis: int = 0) -> np.ndarray:
    """Non-negative-frequency half of the unitary DFT of real ``z``.

    Returns ``n // 2 + 1`` bins along ``axis``.
    """
    z = np.asarray(z, dtype=np.float64)
    axis = _normalize_axis(axis, z.ndim)
    n = z.shape[axis]
    full = dft(z, axis=axis)
    return np.take(full, np.arange(n // 2 + 1), axis=axis)


def irfft(s, n: int, axis: int = 0) -> np.ndarray:
    """Inverse of :func:`rfft` for a length-``n`` real signal.

    Bin 0, and bin ``n/2`` for even ``n``, only contribute their real part.
    """
    s = np.asarray(s, dtype=np.complex128)
    axis = _normalize_axis(axis, s.ndim)
    if n < 1:
        raise DimensionError("signal length must be >= 1")
    bins = n // 2 + 1
    if s.shape[axis] != bins:
        raise DimensionError(
            f"irfft of length {n} needs {bins} bins along axis {axis}, got {s.shape[axis]}"
        )
    half = np.moveaxis(s, axis, 0)
    full = np.empty((n,) + half.shape[1:], dtype=np.complex128)
    full[:bins] = half
    full[0] = full[0].real
    if n % 2 == 0:
        full[n // 2] = full[n // 2].real
    # mirror the strictly positive bins that have a distinct negative partner
    for w in range(1, (n + 1) // 2):
        full[n - w] = np.conj(half[w])
    out = dft(full, axis=0, inverse=True).real
    return np.moveaxis(out, 0, axis)
