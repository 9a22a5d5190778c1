"""Convolution lowering kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is selected. Set ``FSRLAB_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"

if os.environ.get("FSRLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _im2col as _compiled
    except ImportError:
        _compiled = None
else:
    _compiled = None

if _compiled is not None:
    BACKEND = "compiled"
    im2col = _compiled.im2col
    col2im = _compiled.col2im
else:
    im2col = _fallback.im2col
    col2im = _fallback.col2im

out_extent = _fallback.out_extent

__all__ = ["BACKEND", "im2col", "col2im", "out_extent"]
