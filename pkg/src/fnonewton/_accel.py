"""Backend switch for the hot stencil kernels.

Set ``FNONEWTON_NUMBA=0`` before import to force the vectorized numpy path.
Both paths evaluate the same floating-point expressions in the same order,
so results agree to rounding (usually bitwise).
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("FNONEWTON_NUMBA", "1") not in ("0", "false", "no")


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, fastmath=False)(fn)
    return fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
