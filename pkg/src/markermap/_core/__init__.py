"""Kernel backend selection.

The compiled core (_native, Cython) is preferred; the pure-Python mirror is
the fallback so the package works without a C toolchain. Both produce
bit-identical results. Set MARKERMAP_PURE_PYTHON=1 to force the fallback.
"""

import os

if os.environ.get("MARKERMAP_PURE_PYTHON"):
    from markermap._core import pure as kernels
else:
    try:
        from markermap._core import _native as kernels  # type: ignore[no-redef]
    except ImportError:
        from markermap._core import pure as kernels  # type: ignore[no-redef]

K = kernels


def backend_name():
    """Active kernel backend: 'native' (compiled) or 'pure'."""
    return K.NAME
