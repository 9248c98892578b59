"""Hot geometric kernels: compiled core when built, numpy fallback otherwise.

Set ``VECFL_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the
implementation in use.
"""
import os

from . import _fallback

fallback = _fallback

if os.environ.get("VECFL_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _fallback
        BACKEND = "python"
    else:
        BACKEND = "cython"

try:
    from . import _core as compiled
except ImportError:
    compiled = None

wedge_visibility = _impl.wedge_visibility
count_within = _impl.count_within
cover_matrix = _impl.cover_matrix
greedy_cover = _impl.greedy_cover

__all__ = [
    "BACKEND",
    "compiled",
    "count_within",
    "cover_matrix",
    "fallback",
    "greedy_cover",
    "wedge_visibility",
]
