"""Hot kernels with a compiled backend when available.

Set ``BBREPROG_PURE=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py as fallback

BACKEND = "python"
if os.environ.get("BBREPROG_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled  # type: ignore[attr-defined]
    except ImportError:
        compiled = None
    else:
        BACKEND = "cython"
else:
    compiled = None

_impl = compiled if compiled is not None else fallback
fft_rows = _impl.fft_rows
overlap_add = _impl.overlap_add

__all__ = ["BACKEND", "fft_rows", "overlap_add", "fallback", "compiled"]
