"""Hot-loop kernels, compiled when the extension is built.

Set ``FAIRDIFF_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pykernels as py

BACKEND = "python"
if os.environ.get("FAIRDIFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = py
else:
    _impl = py

im2col = _impl.im2col
col2im = _impl.col2im
moore_trace = _impl.moore_trace
fill_polygon = _impl.fill_polygon

__all__ = ["BACKEND", "im2col", "col2im", "moore_trace", "fill_polygon", "py"]
