"""Kernel backend selection.

The hot loops (mod-q vector arithmetic, keystream rejection sampling,
stochastic rounding) have a numba-jitted implementation and a pure-numpy
one. The env var BUFSECAGG_KERNELS picks the backend:

    BUFSECAGG_KERNELS=numba   require numba (ImportError if missing)
    BUFSECAGG_KERNELS=numpy   force the pure-numpy path
    unset / auto              numba when importable, numpy otherwise

Both backends are bit-identical; benchmarks/bench_kernels.py compares them.
"""

import os

_requested = os.environ.get("BUFSECAGG_KERNELS", "auto").lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"BUFSECAGG_KERNELS must be auto, numba or numpy, got {_requested!r}")

if _requested == "numpy":
    from . import _kernels_numpy as _impl

    BACKEND = "numpy"
elif _requested == "numba":
    from . import _kernels_numba as _impl

    BACKEND = "numba"
else:
    try:
        from . import _kernels_numba as _impl

        BACKEND = "numba"
    except ImportError:
        from . import _kernels_numpy as _impl

        BACKEND = "numpy"

mod_add = _impl.mod_add
mod_sub = _impl.mod_sub
mod_scale = _impl.mod_scale
take_below = _impl.take_below
quantize_stochastic = _impl.quantize_stochastic
signed_lift = _impl.signed_lift
