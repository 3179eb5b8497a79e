"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``SPIKEDET_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
kernels = _kernels_py

if not os.environ.get("SPIKEDET_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        BACKEND = "cython"


def thread_cap():
    """Worker count allowed by SPIKEDET_THREADS (default: CPU count)."""
    raw = os.environ.get("SPIKEDET_THREADS")
    ncpu = os.cpu_count() or 1
    if not raw:
        return ncpu
    try:
        n = int(raw)
    except ValueError:
        return ncpu
    return max(1, min(n, ncpu))
