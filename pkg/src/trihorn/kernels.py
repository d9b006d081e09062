"""Kernel backend selection.

The compiled extension is used when it was built; otherwise (or when
``TRIHORN_PURE_PYTHON=1``) the numpy implementations are used. Both expose
``im2col``, ``col2im``, ``maxpool2`` and ``maxpool2_backward``.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("TRIHORN_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2 = _impl.maxpool2
maxpool2_backward = _impl.maxpool2_backward
