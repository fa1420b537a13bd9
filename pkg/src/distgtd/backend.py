"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementation. ``DISTGTD_BACKEND=python`` forces the fallback.
"""

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_requested = os.environ.get("DISTGTD_BACKEND", "").strip().lower()
if _requested not in ("", "python", "cython"):
    raise ImportError(f"DISTGTD_BACKEND must be 'python' or 'cython', got {_requested!r}")
if _requested == "cython" and _compiled is None:
    raise ImportError("DISTGTD_BACKEND=cython but the compiled extension is not available")

BACKEND = "python" if (_requested == "python" or _compiled is None) else "cython"


def available() -> list:
    return ["python"] + (["cython"] if _compiled is not None else [])


def get(name: str = None) -> ModuleType:
    name = name or BACKEND
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    if name == "python":
        return _pykernels
    raise ValueError(f"unknown backend {name!r}")
