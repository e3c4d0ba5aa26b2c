"""Backend selection for the hot numeric kernels.

Convolution forward/backward and max pooling exist twice: as numba
``@njit`` loops and as a vectorized pure-numpy fallback. The environment
variable ``KFLO_BACKEND`` picks one at import time:

    KFLO_BACKEND=numba   force the jitted kernels (ImportError if numba missing)
    KFLO_BACKEND=numpy   force the fallback
    unset               numba when importable, numpy otherwise

Both backends accumulate in float64 and return arrays in the input dtype,
so they agree to float rounding; summation order differs, so bit equality
across backends is not guaranteed. Within one backend, results are
deterministic run to run.
"""

import os

from ..errors import ConfigError

_requested = os.environ.get("KFLO_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ConfigError(
        f"KFLO_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    from . import numpy_ops as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_ops as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import numpy_ops as _impl

        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
