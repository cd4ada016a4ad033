"""Kernel backend selection.

Hot inner loops (batched mixer forward/backward, pairwise haversine) have two
implementations: numba-jitted kernels and a pure-numpy fallback. The active
backend is chosen once at import time:

  CVMIX_BACKEND=numba   force numba (error if not importable)
  CVMIX_BACKEND=numpy   force the pure-numpy path
  unset                 numba when importable, numpy otherwise

Both paths compute the same operations in the same order; results agree to
floating-point reduction differences (< 1e-12 relative in practice).
"""

import os

_FORCED = os.environ.get("CVMIX_BACKEND", "").strip().lower()

if _FORCED not in ("", "numba", "numpy"):
    raise RuntimeError(f"CVMIX_BACKEND must be 'numba' or 'numpy', got {_FORCED!r}")

_numba_ok = False
if _FORCED in ("", "numba"):
    try:
        import warnings

        # harmless platform notice about the TBB threading layer version
        warnings.filterwarnings("ignore", message=".*TBB threading layer.*")
        import numba  # noqa: F401
        _numba_ok = True
    except ImportError:
        if _FORCED == "numba":
            raise

BACKEND = "numba" if _numba_ok else "numpy"


def backend_name() -> str:
    return BACKEND


def set_num_threads(n: int) -> None:
    """Cap the numba threading layer. No effect on the numpy path.

    Kernels only parallelize over disjoint output slices, so results are
    bit-identical for every thread count.
    """
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    if BACKEND == "numba":
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
