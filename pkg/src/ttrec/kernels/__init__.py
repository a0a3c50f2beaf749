"""Hot-loop kernels with a compiled core and a NumPy fallback.

The compiled extension ``_core`` is used when it was built; otherwise, or
when ``TTREC_KERNELS=python`` is set, the NumPy versions in ``_fallback``
are used. ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("TTREC_KERNELS", "").lower() == "python":
        raise ImportError("compiled kernels disabled by TTREC_KERNELS")
    from . import _core as _impl
    BACKEND = "compiled"
except ImportError:
    _impl = _fallback
    BACKEND = "python"


def sq_dist_to_centers(points, centers):
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    return _impl.sq_dist_to_centers(points, centers)


def pairwise_sq_sum(members):
    members = np.ascontiguousarray(members, dtype=np.float64)
    if members.ndim != 2:
        raise ValueError("members must be a 2-d array")
    total, grad = _impl.pairwise_sq_sum(members)
    return float(total), grad


__all__ = ["BACKEND", "sq_dist_to_centers", "pairwise_sq_sum"]
