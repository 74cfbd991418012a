"""Backend selection for the per-pixel and ranking kernels.

The compiled Cython module is used when it was built; otherwise (or when
``OASS_PURE_PYTHON=1`` is set) the pure-Python fallback is loaded. Both
expose the same three functions and must agree exactly.
"""
import os
from types import ModuleType

from . import _fallback


def _load_compiled() -> ModuleType | None:
    if os.environ.get("OASS_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
_impl = _compiled if _compiled is not None else _fallback
BACKEND = "cython" if _compiled is not None else "python"

local_maxima = _impl.local_maxima
ranked_average_precision = _impl.ranked_average_precision
ranked_average_precision_11pt = _impl.ranked_average_precision_11pt


def available_backends() -> dict[str, ModuleType]:
    backends = {"python": _fallback}
    if _compiled is not None:
        backends["cython"] = _compiled
    else:
        try:
            from . import _kernels
            backends["cython"] = _kernels
        except ImportError:
            pass
    return backends
