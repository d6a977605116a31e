"""Hot loops, with a numba and a pure-numpy implementation.

The backend is picked once at import time from ``VOXMARCH_BACKEND``
(``numba`` by default, ``numpy`` to force the fallback). If numba cannot be
imported the numpy path is used silently.
"""

import importlib
import os

_NAMES = (
    "grid_lookup",
    "march_grid",
    "filter_samples",
    "accumulate",
    "accumulate_backward",
    "trilinear_forward",
    "trilinear_backward",
)


def load_backend(name: str):
    """Import and return the kernel module for ``name`` (``"numba"`` or ``"numpy"``)."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return importlib.import_module(f"{__name__}._{name}")


def _select():
    # probing TBB first emits a version warning on common installs
    os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")
    requested = os.environ.get("VOXMARCH_BACKEND", "numba").strip().lower() or "numba"
    if requested == "numba":
        try:
            return "numba", load_backend("numba")
        except ImportError:
            return "numpy", load_backend("numpy")
    return requested, load_backend(requested)


BACKEND, _impl = _select()

grid_lookup = _impl.grid_lookup
march_grid = _impl.march_grid
filter_samples = _impl.filter_samples
accumulate = _impl.accumulate
accumulate_backward = _impl.accumulate_backward
trilinear_forward = _impl.trilinear_forward
trilinear_backward = _impl.trilinear_backward


def set_num_threads(n: int) -> int:
    """Set the numba worker count (clamped to what numba was started with)."""
    if BACKEND != "numba":
        return 1
    import numba

    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


__all__ = ["BACKEND", "load_backend", "set_num_threads", *_NAMES]
