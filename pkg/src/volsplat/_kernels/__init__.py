"""Kernel backend selection.

The compiled Cython kernel is used when its extension imported cleanly;
otherwise the numpy fallback takes over. Set VOLSPLAT_FORCE_NUMPY=1 to
force the fallback (used by the backend-agreement tests and benchmark).
"""

import os

if os.environ.get("VOLSPLAT_FORCE_NUMPY") == "1":
    from ._composite_np import ALPHA_MAX, T_CUTOFF, composite_tile

    BACKEND = "numpy"
else:
    try:
        from ._composite_cy import ALPHA_MAX, T_CUTOFF, composite_tile

        BACKEND = "cython"
    except ImportError:
        from ._composite_np import ALPHA_MAX, T_CUTOFF, composite_tile

        BACKEND = "numpy"

__all__ = ["composite_tile", "BACKEND", "ALPHA_MAX", "T_CUTOFF"]
