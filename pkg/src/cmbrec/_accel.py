"""Backend selection for the compiled kernels.

Set ``CMBREC_BACKEND=numpy`` to force the pure-numpy code paths even when
numba is importable.  Any other value (or unset) uses numba if available.
"""
import os
import warnings

try:
    import numba
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def _resolve() -> str:
    requested = os.environ.get("CMBREC_BACKEND", "").strip().lower()
    if requested == "numpy" or not NUMBA_AVAILABLE:
        return "numpy"
    return "numba"


BACKEND = _resolve()


def use_numba() -> bool:
    return BACKEND == "numba"


def set_threads(n: int) -> None:
    """Cap the worker pool used by numba and the BLAS libraries numpy links."""
    if n < 1:
        raise ValueError("thread count must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    if NUMBA_AVAILABLE:
        with warnings.catch_warnings():
            # threading-layer probing warns about optional backends (TBB)
            warnings.simplefilter("ignore", numba.NumbaWarning)
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
