"""Kernel backend selection.

The default backend is numba; set ``HOMEY_BACKEND=numpy`` to force the
pure-numpy fallback (or ``HOMEY_BACKEND=numba`` to fail loudly if numba is
missing). ``HOMEY_THREADS`` caps the numba thread pool; nothing else in the
package spawns workers.
"""
from __future__ import annotations

import os

from . import numpy_impl

_CHOICE = os.environ.get("HOMEY_BACKEND", "").strip().lower()


def _load():
    if _CHOICE == "numpy":
        return numpy_impl
    try:
        import numba

        threads = os.environ.get("HOMEY_THREADS", "").strip()
        if threads:
            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
        from . import numba_impl

        return numba_impl
    except ImportError:
        if _CHOICE == "numba":
            raise
        return numpy_impl


active = _load()
BACKEND = active.NAME
