"""Backend selection for the convolution kernels.

The compiled module is preferred; set ``SFDET_KERNELS=python`` to force the
numpy fallback (both produce the same values up to float rounding).
"""

from __future__ import annotations

import os

from sfdet import _pykernels

_requested = os.environ.get("SFDET_KERNELS", "auto").lower()

if _requested == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from sfdet import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
