"""Backend switch for the compiled kernels.

Set ``DISENTLAB_DISABLE_JIT=1`` to force the pure-numpy paths. The flag is
read once, at import time.
"""

import os

_FLAG = os.environ.get("DISENTLAB_DISABLE_JIT", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_JIT = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` with numba when available, else return it untouched."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend_name():
    return "numba" if USE_JIT else "numpy"
