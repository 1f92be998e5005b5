"""Backend selection for the conv kernels.

The compiled core (``anovis._native``) is preferred when it imported cleanly;
``ANOVIS_NO_NATIVE=1`` forces the NumPy fallback. The choice is made once at
import so a whole run uses a single backend.
"""

import os

from . import _py_kernels

try:
    from anovis import _native
except ImportError:
    _native = None

if _native is not None and os.environ.get("ANOVIS_NO_NATIVE", "") != "1":
    _impl = _native
    BACKEND = "native"
else:
    _impl = _py_kernels
    BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight


def active_backend() -> str:
    """Which kernel implementation this process is using."""
    return BACKEND
