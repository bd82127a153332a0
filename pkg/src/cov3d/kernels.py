"""Backend selection for the hot kernels.

The compiled extension is preferred. Set ``COV3D_PURE_PYTHON=1`` before
import to force the numpy implementation.
"""
import logging
import os

from cov3d import _pykernels

logger = logging.getLogger(__name__)

BACKEND = "python"
_impl = _pykernels

if os.environ.get("COV3D_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from cov3d import _ckernels as _compiled
    except ImportError:  # pragma: no cover - depends on build
        logger.debug("compiled kernels unavailable; using numpy fallback")
    else:
        _impl = _compiled
        BACKEND = "cython"

vol2col = _impl.vol2col
col2vol = _impl.col2vol
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
resize_trilinear = _impl.resize_trilinear

__all__ = [
    "BACKEND",
    "vol2col",
    "col2vol",
    "maxpool_forward",
    "maxpool_backward",
    "resize_trilinear",
]
