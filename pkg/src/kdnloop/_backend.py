"""Backend selection for the numeric kernels.

Set ``KDNLOOP_BACKEND=numpy`` to force the pure-numpy code path; the default
uses numba when it can be imported.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in CI
    numba = None
    HAVE_NUMBA = False

BACKEND_ENV = "KDNLOOP_BACKEND"


def requested_backend():
    return os.environ.get(BACKEND_ENV, "numba").strip().lower()


USE_NUMBA = HAVE_NUMBA and requested_backend() != "numpy"


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn
