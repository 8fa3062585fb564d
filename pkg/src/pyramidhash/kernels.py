"""Backend selection for the hot kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is imported. Setting ``PYRAMIDHASH_PURE_PYTHON=1`` forces the
fallback even when the extension is available.
"""
import os

if os.environ.get("PYRAMIDHASH_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as _impl

        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
hamming_matrix = _impl.hamming_matrix

__all__ = ["BACKEND", "im2col", "col2im", "hamming_matrix"]
