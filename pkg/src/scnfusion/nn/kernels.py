"""Kernel backend selection.

The compiled Cython module is preferred; the pure-numpy module is used when
the extension is unavailable or when ``SCNFUSION_KERNELS=python``.
"""
import os

from . import _pykernels

_requested = os.environ.get("SCNFUSION_KERNELS", "auto").lower()

if _requested == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
batchnorm_forward_train = _impl.batchnorm_forward_train
batchnorm_backward_train = _impl.batchnorm_backward_train
relu_forward = _impl.relu_forward
relu_backward = _impl.relu_backward

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "batchnorm_forward_train",
    "batchnorm_backward_train",
    "relu_forward",
    "relu_backward",
]
