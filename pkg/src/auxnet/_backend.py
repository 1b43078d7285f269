"""Kernel backend selection.

The compiled core (``auxnet._ckernels``) is used when it imports; otherwise
the numpy implementation is used. ``AUXNET_BACKEND=numpy`` forces the
fallback at import time, and :func:`set_backend` switches at runtime.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_impl = _pykernels
name = "numpy"


def available():
    return ["numpy"] + (["cython"] if _ckernels is not None else [])


def set_backend(which):
    global _impl, name
    if which == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; reinstall with Cython available")
        _impl, name = _ckernels, "cython"
    elif which == "numpy":
        _impl, name = _pykernels, "numpy"
    else:
        raise ValueError(f"unknown backend {which!r}")


def im2col(x, k, stride, pad):
    return _impl.im2col(np.ascontiguousarray(x), k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    B, C, H, W = shape
    return _impl.col2im(np.ascontiguousarray(cols), B, C, H, W, k, stride, pad)


_requested = os.environ.get("AUXNET_BACKEND", "auto")
if _requested == "auto":
    if _ckernels is not None:
        set_backend("cython")
else:
    set_backend(_requested)
