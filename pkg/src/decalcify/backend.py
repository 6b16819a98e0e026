"""Kernel backend selection.

The hot conv/pool kernels exist twice: a numba-jitted version and a
pure-numpy fallback with identical call signatures.  Selection happens
once, at import time, from the environment:

    DECALCIFY_BACKEND=auto    use numba when importable (default)
    DECALCIFY_BACKEND=numba   require numba, fail loudly if missing
    DECALCIFY_BACKEND=numpy   force the pure-numpy fallback

``benchmarks/bench_kernels.py`` times both implementations side by side.
"""

import os
import sys

_REQUESTED = os.environ.get("DECALCIFY_BACKEND", "auto").lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"DECALCIFY_BACKEND must be auto, numba or numpy, got {_REQUESTED!r}")

if _REQUESTED == "numpy":
    from . import _kernels_numpy as _impl
    BACKEND = "numpy"
else:
    try:
        from . import _kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:
        if _REQUESTED == "numba":
            raise
        from . import _kernels_numpy as _impl
        BACKEND = "numpy"
        print("decalcify: numba unavailable, using pure-numpy kernels",
              file=sys.stderr)

conv3d_forward = _impl.conv3d_forward
conv3d_backward_input = _impl.conv3d_backward_input
conv3d_backward_weights = _impl.conv3d_backward_weights
maxpool3d_forward = _impl.maxpool3d_forward
maxpool3d_backward = _impl.maxpool3d_backward


def kernel_backend() -> str:
    """Name of the active kernel implementation ("numba" or "numpy")."""
    return BACKEND
