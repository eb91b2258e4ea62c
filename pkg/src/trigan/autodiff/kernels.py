"""Backend selection for the convolution hot loops.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementation in ``_kernels_py`` is used. Setting ``TRIGAN_PURE_PYTHON=1``
forces the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("TRIGAN_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold ``(N, C, H, W)`` into ``(N, C*kh*kw, OH*OW)`` patch columns."""
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols, C, H, W, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col`: scatter-add columns back into ``(N, C, H, W)``."""
    return _impl.col2im(
        np.ascontiguousarray(cols, dtype=np.float64), C, H, W, kh, kw, stride, pad
    )


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"`` (benchmarks, tests)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
