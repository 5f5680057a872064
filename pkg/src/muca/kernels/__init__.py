"""Hot convolution kernels, compiled when available.

The Cython extension is picked at import time; set ``MUCA_PURE_PYTHON=1``
to force the numpy fallback. Both backends produce identical bits.
"""
import os

import numpy as np

from . import _conv_py

if os.environ.get("MUCA_PURE_PYTHON", "") not in ("", "0"):
    _ext = None
else:
    try:
        from . import _conv_ext as _ext
    except ImportError:
        _ext = None

BACKEND = "cython" if _ext is not None else "numpy"


def im2col(x, k, stride, pad):
    if _ext is None:
        return _conv_py.im2col(x, k, stride, pad)
    return _ext.im2col(np.ascontiguousarray(x), k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    if _ext is None:
        return _conv_py.col2im(cols, shape, k, stride, pad)
    return _ext.col2im(np.ascontiguousarray(cols), tuple(int(s) for s in shape), k, stride, pad)


__all__ = ["BACKEND", "im2col", "col2im"]
