"""Kernel backend selection.

Hot inner loops (convolutions, connected-component labelling) exist in two
variants: numba @njit kernels and pure numpy/Python fallbacks.  The active
backend is chosen once at import time from the DUALSEG_BACKEND environment
variable:

    DUALSEG_BACKEND=numba   require numba, fail if it cannot be imported
    DUALSEG_BACKEND=numpy   force the fallback path
    DUALSEG_BACKEND=auto    numba when importable, fallback otherwise (default)

Within one backend, results are bit-reproducible run to run; across backends
the two paths may differ in the last ulp because summation order differs.
"""

from __future__ import annotations

import os

_choice = os.environ.get("DUALSEG_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"DUALSEG_BACKEND must be auto, numba or numpy, got {_choice!r}")

if _choice == "numpy":
    _numba = None
else:
    try:
        import numba as _numba
    except ImportError:
        if _choice == "numba":
            raise
        _numba = None

HAS_NUMBA = _numba is not None
BACKEND = "numba" if HAS_NUMBA else "numpy"

if HAS_NUMBA:
    def njit(func):
        return _numba.njit(cache=True)(func)
else:
    def njit(func):
        return func
