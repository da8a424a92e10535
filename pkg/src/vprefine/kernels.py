"""Kernel selection: the compiled extension when importable, else the pure-Python twin.

Set ``VPREFINE_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("VPREFINE_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

fnv1a64 = _impl.fnv1a64
hash_embed = _impl.hash_embed
dot_rows = _impl.dot_rows
