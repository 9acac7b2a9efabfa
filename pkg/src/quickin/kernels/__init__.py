"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``QUICKIN_DISABLE_NUMBA=1``
to force the numpy path; it is also used when numba cannot be imported.
Both backends are importable directly (``kernels.numpy_backend``,
``kernels.numba_backend``) so tests and benchmarks can compare them.
"""
import logging
import os

from . import _numpy as numpy_backend

log = logging.getLogger(__name__)

numba_backend = None
if os.environ.get("QUICKIN_DISABLE_NUMBA", "0") not in ("1", "true", "yes"):
    try:
        from . import _numba as numba_backend
    except ImportError:  # pragma: no cover
        log.warning("numba unavailable, using numpy kernels")

_impl = numba_backend if numba_backend is not None else numpy_backend
BACKEND = "numba" if _impl is numba_backend else "numpy"

haversine_km = _impl.haversine_km
distance_matrix_m = _impl.distance_matrix_m
rssi_matrix = _impl.rssi_matrix
interpolate_polylines = _impl.interpolate_polylines
window_stats = _impl.window_stats

__all__ = [
    "BACKEND",
    "distance_matrix_m",
    "haversine_km",
    "interpolate_polylines",
    "numba_backend",
    "numpy_backend",
    "rssi_matrix",
    "window_stats",
]
