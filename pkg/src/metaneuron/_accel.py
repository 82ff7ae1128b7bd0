"""Numba switch.

Set ``METANEURON_NUMBA=0`` to run every kernel through its pure-numpy path.
The flag is read once at import time.
"""

import os

_FLAG = os.environ.get("METANEURON_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")


def njit(func):
    """``numba.njit(cache=True)`` or a no-op when numba is unavailable."""
    if numba is None:
        return func
    return numba.njit(cache=True)(func)
