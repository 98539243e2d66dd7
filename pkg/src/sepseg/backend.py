"""Kernel backend selection.

The compiled extension (`sepseg._kernels_cy`) is optional: if it is missing or
fails to import, the pure-numpy fallback is used. Set SEPSEG_KERNELS=python or
SEPSEG_KERNELS=cython to force a choice (forcing cython raises if the extension
is unavailable, so tests can assert it was really built).
"""

import os

from . import _kernels_np

_FORCED = os.environ.get("SEPSEG_KERNELS", "").strip().lower()

if _FORCED == "python":
    kernels = _kernels_np
elif _FORCED == "cython":
    from . import _kernels_cy as kernels  # noqa: F401  (ImportError is the contract)
elif _FORCED:
    raise ValueError(f"SEPSEG_KERNELS={_FORCED!r}: expected 'python' or 'cython'")
else:
    try:
        from . import _kernels_cy as kernels
    except ImportError:
        kernels = _kernels_np

BACKEND_NAME = kernels.BACKEND_NAME

dw_conv2d_forward = kernels.dw_conv2d_forward
dw_conv2d_backward = kernels.dw_conv2d_backward
saf_apply_forward = kernels.saf_apply_forward
saf_apply_backward = kernels.saf_apply_backward
