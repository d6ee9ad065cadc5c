"""Numba dispatch.

Hot kernels are written once in a numba-compatible subset of numpy. When
numba is importable and ``VIEWGRASP_DISABLE_NUMBA`` is unset (or ``0``),
they are compiled with ``@njit``; otherwise the vectorised numpy fallbacks
in :mod:`viewgrasp.kernels` are used instead.
"""

from __future__ import annotations

import os

_disabled = os.environ.get("VIEWGRASP_DISABLE_NUMBA", "0").lower() not in ("0", "", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by VIEWGRASP_DISABLE_NUMBA")
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    _njit = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("fastmath", False)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
