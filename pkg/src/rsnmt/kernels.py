"""Kernel backend selection.

The compiled extension is used when it imports cleanly; setting
``RSNMT_PURE_PYTHON=1`` forces the numpy fallback. ``BACKEND`` names the
active one.
"""

import os

from . import _kernels_py

if os.environ.get("RSNMT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
smoothed_ce = _impl.smoothed_ce
scatter_add_rows = _impl.scatter_add_rows

__all__ = [
    "BACKEND",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "smoothed_ce",
    "scatter_add_rows",
]
