"""Kernel selection: compiled extension when importable, numpy otherwise.

Set ``SPIDEFECT_PURE_PYTHON=1`` to force the numpy path.
"""
import os

from . import _fallback

BACKEND = "python"
if os.environ.get("SPIDEFECT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

node_sums = _impl.node_sums
gather_sorted = _impl.gather_sorted
find_splits = _impl.find_splits
predict_sum = _impl.predict_sum
route = _impl.route
