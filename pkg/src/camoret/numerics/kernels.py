"""Kernel backend selection.

The compiled Cython module is used when it imports cleanly; otherwise the
numpy implementation is used. Set ``CAMORET_PURE_PYTHON=1`` to force the
fallback (the benchmark and the backend-agreement tests rely on this).
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CAMORET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
gelu_forward = _kernels_py.gelu_forward
gelu_backward = _impl.gelu_backward

__all__ = [
    "BACKEND",
    "layernorm_forward",
    "layernorm_backward",
    "softmax_forward",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
]
