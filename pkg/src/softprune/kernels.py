"""Backend selection for the convolution hot loops.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy implementation in ``_kernels_py`` is used. Setting the environment
variable ``SOFTPRUNE_PURE_PYTHON=1`` forces the fallback.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("SOFTPRUNE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "numpy"


def im2col(x, k, stride, pad, ho, wo):
    """Unfold ``x`` (B, C, H, W) into columns of shape (B, C*K*K, Ho*Wo)."""
    if k == 1 and stride == 1 and pad == 0:
        return np.ascontiguousarray(x).reshape(x.shape[0], x.shape[1], -1)
    return _impl.im2col(np.ascontiguousarray(x), k, stride, pad, ho, wo)


def col2im(cols, c, h, w, k, stride, pad, ho, wo):
    """Scatter-add columns back to an image of shape (B, C, H, W)."""
    if k == 1 and stride == 1 and pad == 0:
        return np.array(cols, copy=True).reshape(cols.shape[0], c, h, w)
    return _impl.col2im(np.ascontiguousarray(cols), c, h, w, k, stride, pad, ho, wo)
