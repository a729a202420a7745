"""Convolution kernel backend, chosen once at import.

The compiled extension is used when it was built; ``SONOSKILL_PURE=1`` forces
the numpy fallback.
"""

import os

from . import _fallback

fallback = _fallback

if os.environ.get("SONOSKILL_PURE"):
    compiled = None
else:
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else _fallback
BACKEND = "compiled" if compiled is not None else "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
