"""Optional numba acceleration.

Set ``FEDKD_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time.
"""

import functools
import os

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is an optional speedup
    _nb = None

NUMBA_AVAILABLE = _nb is not None
NUMBA_DISABLED = os.environ.get("FEDKD_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = NUMBA_AVAILABLE and not NUMBA_DISABLED


def njit(func=None, **kwargs):
    """``numba.njit`` with project defaults, or a no-op when numba is missing.

    ``fastmath`` stays off: the kernels must keep IEEE operation order so the
    compensated sums match the numpy fallback bit for bit. ``error_model``
    is numpy's (x/0 gives inf, no exception), which also drops the per-element
    zero check that keeps loops from vectorizing.
    """
    opts = {"cache": True, "nogil": True, "fastmath": False, "error_model": "numpy"}
    opts.update(kwargs)
    if _nb is None:
        if func is None:
            return lambda f: f
        return func
    decorator = functools.partial(_nb.njit, **opts)
    if func is None:
        return decorator
    return decorator(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
