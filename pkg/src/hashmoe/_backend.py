"""Kernel backend selection.

The compiled extension is used when importable. ``HASHMOE_BACKEND=python``
forces the NumPy fallback; ``HASHMOE_BACKEND=compiled`` makes a missing
extension an import error instead of a silent fallback.
"""

from __future__ import annotations

import os
import warnings

from hashmoe import _fallback

_requested = os.environ.get("HASHMOE_BACKEND", "auto").lower()

if _requested == "python":
    kernels = _fallback
    NAME = "python"
else:
    try:
        from hashmoe import _core as kernels  # type: ignore[attr-defined]

        NAME = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        warnings.warn("hashmoe._core not built; using the NumPy fallback kernels", RuntimeWarning, stacklevel=2)
        kernels = _fallback
        NAME = "python"


def get(name: str):
    """Return a kernel module by name ("compiled" or "python")."""
    if name == "python":
        return _fallback
    from hashmoe import _core  # type: ignore[attr-defined]

    return _core
