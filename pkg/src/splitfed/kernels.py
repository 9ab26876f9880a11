"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy twin in ``_pykernels``. Set ``SPLITFED_BACKEND=python`` to force the
fallback (useful for benchmarking and for checking the two agree).
"""
import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("SPLITFED_BACKEND", "").lower() != "python":
    _impl = compiled_backend
    BACKEND = "cython"
else:
    _impl = python_backend
    BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
upsample2_forward = _impl.upsample2_forward
upsample2_backward = _impl.upsample2_backward

__all__ = [
    "BACKEND",
    "compiled_backend",
    "python_backend",
    "im2col",
    "col2im",
    "maxpool2_forward",
    "maxpool2_backward",
    "upsample2_forward",
    "upsample2_backward",
]
