"""Kernel backend selection.

Hot loops are written twice: once as numba ``@njit`` kernels and once as
vectorised numpy. ``CHANNELKAN_BACKEND=numpy`` forces the fallback; the
default is numba when it imports cleanly.
"""

import os

BACKEND_ENV = "CHANNELKAN_BACKEND"

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    NUMBA_AVAILABLE = False


def requested_backend() -> str:
    value = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {value!r}")
    return value


def use_numba() -> bool:
    return NUMBA_AVAILABLE and requested_backend() == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if NUMBA_AVAILABLE:
        import numba

        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap
