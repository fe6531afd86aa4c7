"""Select the compiled kernels when available, else the numpy fallback.

Set ``BARRIERNET_FORCE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

fallback = _fallback

if os.environ.get("BARRIERNET_FORCE_PYTHON", "") == "1":
    kernels = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels
        BACKEND = "cython"
    except ImportError:
        kernels = _fallback
        BACKEND = "python"

OPTIMAL = _fallback.OPTIMAL
INFEASIBLE = _fallback.INFEASIBLE
MAX_ITER = _fallback.MAX_ITER
