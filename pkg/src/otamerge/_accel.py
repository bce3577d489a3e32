"""Backend selection for the numeric kernels.

Kernels are compiled with numba when it is importable and ``OTA_DISABLE_NUMBA``
is unset (or ``0``). Otherwise the pure-numpy implementations are used. Both
backends perform the same floating point operations in the same order, so
their results are bit-identical.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("OTA_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG in ("", "0", "false", "no")


def njit(fn):
    """Compile ``fn`` in nopython mode, or return it unchanged without numba."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def thread_cap() -> int:
    """Maximum worker count from ``OTA_THREADS`` (defaults to the CPU count)."""
    raw = os.environ.get("OTA_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"OTA_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1
