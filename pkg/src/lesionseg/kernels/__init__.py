"""Convolution patch kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable; set the environment
variable ``LESIONSEG_FORCE_PYTHON=1`` to force the numpy backend (useful
for the backend-equivalence tests and the benchmark).
"""

import os

import numpy as np

from . import _conv_py

if os.environ.get("LESIONSEG_FORCE_PYTHON"):
    _impl = _conv_py
else:
    try:
        from . import _conv_cy as _impl
    except ImportError:
        _impl = _conv_py

BACKEND = _impl.BACKEND


def im2col(x, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow):
    x = np.ascontiguousarray(x)
    return _impl.im2col(x, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow):
    cols = np.ascontiguousarray(cols)
    return _impl.col2im(cols, n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow)


def available_backends():
    """Names of the importable backends (for tests and the benchmark)."""
    names = ["python"]
    try:
        from . import _conv_cy  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    """Return the kernel module for ``name`` ("python" or "cython")."""
    if name == "python":
        return _conv_py
    if name == "cython":
        from . import _conv_cy
        return _conv_cy
    raise ValueError(f"unknown kernel backend {name!r}")
