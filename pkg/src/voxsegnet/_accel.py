"""Backend selection for the hot kernels.

The numba path is used when numba imports cleanly and ``VOXSEG_NUMBA`` is not
set to a false-ish value. ``VOXSEG_NUMBA=0`` forces the pure-numpy kernels.
The flag is read once at import time; use :func:`set_backend` to switch at
runtime (tests and the benchmark do this).
"""

import os

# TBB in this image is too old for numba and triggers a warning on every
# parallel launch; the workqueue layer is always available.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

    prange = range


def _flag_enabled(value):
    return value.strip().lower() not in ("0", "false", "no", "off", "")


_use_numba = HAVE_NUMBA and _flag_enabled(os.environ.get("VOXSEG_NUMBA", "1"))


def use_numba():
    return _use_numba


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels. Returns the previous name."""
    global _use_numba
    previous = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    return previous


def backend():
    return "numba" if _use_numba else "numpy"


def set_threads(n):
    """Worker threads for parallel numba kernels (no-op on the numpy path)."""
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
