"""Kernel backend selection.

The compiled extension is used when it imports; ``VENTALLOC_PURE_PYTHON=1``
forces the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("VENTALLOC_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

advance_beds = _impl.advance_beds
greedy_select = _impl.greedy_select
gather_tokens = _impl.gather_tokens

VACANT, NORMAL, SURVIVED, DEAD = _kernels_py.VACANT, _kernels_py.NORMAL, _kernels_py.SURVIVED, _kernels_py.DEAD
EV_NONE = _kernels_py.EV_NONE
EV_CLEARED = _kernels_py.EV_CLEARED
EV_SURVIVED = _kernels_py.EV_SURVIVED
EV_DEAD_VENT = _kernels_py.EV_DEAD_VENT
EV_DEAD_DENIED = _kernels_py.EV_DEAD_DENIED


def backends():
    """Both implementations by name (the compiled one only if built)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        return out
    out["cython"] = _compiled
    return out
