"""JIT switch for the hot per-subject kernels.

Set ``NAGVAC_DISABLE_NUMBA=1`` to force the pure-numpy path.  numba's own
``NUMBA_DISABLE_JIT`` is honoured by numba itself.
"""

import os

_DISABLED = os.environ.get("NAGVAC_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(func):
    """Compile ``func`` in nopython mode if numba is available, else return it."""
    if not HAVE_NUMBA:
        return func
    return _numba.njit(cache=True, nogil=True)(func)
