"""Hot-loop kernels with backend selection.

THERMODET_KERNELS=auto|numba|numpy picks the implementation at import
time. "auto" (default) prefers the numba JIT kernels and falls back to
pure numpy when numba is not importable; "numba" makes a missing numba
an error. KERNEL_BACKEND reports what was selected.
"""

import os

from ..errors import ConfigError
from . import numpy_backend

_choice = os.environ.get("THERMODET_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"THERMODET_KERNELS must be auto, numba or numpy, got {_choice!r}"
    )

if _choice == "numpy":
    _impl = numpy_backend
    KERNEL_BACKEND = "numpy"
else:
    try:
        from . import numba_backend as _impl

        KERNEL_BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        _impl = numpy_backend
        KERNEL_BACKEND = "numpy"

conv3x3 = _impl.conv3x3
depthwise3x3 = _impl.depthwise3x3
pointwise = _impl.pointwise
conv3x3_bwd = _impl.conv3x3_bwd
depthwise3x3_bwd = _impl.depthwise3x3_bwd
pointwise_bwd = _impl.pointwise_bwd
conv3x3_int8 = _impl.conv3x3_int8
depthwise3x3_int8 = _impl.depthwise3x3_int8
pointwise_int8 = _impl.pointwise_int8

__all__ = [
    "KERNEL_BACKEND",
    "conv3x3",
    "depthwise3x3",
    "pointwise",
    "conv3x3_bwd",
    "depthwise3x3_bwd",
    "pointwise_bwd",
    "conv3x3_int8",
    "depthwise3x3_int8",
    "pointwise_int8",
]
