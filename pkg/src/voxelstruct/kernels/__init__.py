"""Hot inner-loop kernels with a compiled core and a NumPy fallback.

The compiled extension ``_ckernels`` is used when it imports; set
``VOXELSTRUCT_PURE_PYTHON=1`` to force the NumPy versions. ``BACKEND`` names
the active implementation.
"""
import os

from . import _pykernels

if os.environ.get("VOXELSTRUCT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
maxpool3d_forward = _impl.maxpool3d_forward
maxpool3d_backward = _impl.maxpool3d_backward
neighborhood_max = _impl.neighborhood_max

__all__ = [
    "BACKEND",
    "im2col3d",
    "col2im3d",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "neighborhood_max",
]
