"""Backend selection for the window-sweep kernels.

The compiled extension is used when it imports; setting
``FRAILSCAN_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from frailscan import _kernels_py

if os.environ.get("FRAILSCAN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from frailscan import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

prefix_sums = _impl.prefix_sums
prefix_quadratic = _impl.prefix_quadratic
gaussian_llr = _impl.gaussian_llr
logrank_pair_matrix = _impl.logrank_pair_matrix
