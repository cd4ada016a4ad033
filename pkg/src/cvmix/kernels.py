"""Dispatch layer over the numba / numpy kernel twins.

Weight-gradient reduction over the batch happens here, in a fixed order,
so training results do not depend on the backend's internal parallelism.
"""

import numpy as np

from .backend import BACKEND

if BACKEND == "numba":
    from . import _kernels_numba as _impl
else:
    from . import _kernels_numpy as _impl


def mixer_forward_batch(tokens, W1, b1, W2, b2, Wd, Wr):
    """Descriptors plus cached activations for a batch of token grids."""
    return _impl.mixer_forward_batch(tokens, W1, b1, W2, b2, Wd, Wr)


def mixer_backward_batch(upstream, W1, W2, Wd, Wr, X, A, Zp, v, nrm):
    """Batch-summed weight gradients and per-sample token gradients.

    Returns (gW1, gb1, gW2, gb2, gWd, gWr, gtokens); weight gradients are
    summed over the batch axis here, sequentially.
    """
    per = _impl.mixer_backward_batch(upstream, W1, W2, Wd, Wr, X, A, Zp, v, nrm)
    gW1, gb1, gW2, gb2, gWd, gWr, gtokens = per
    return (
        gW1.sum(axis=0),
        gb1.sum(axis=0),
        gW2.sum(axis=0),
        gb2.sum(axis=0),
        gWd.sum(axis=0),
        gWr.sum(axis=0),
        gtokens,
    )


def haversine_matrix(lat: np.ndarray, lon: np.ndarray, radius: float) -> np.ndarray:
    """All-pairs haversine distances (meters) for degree coordinates."""
    lat = np.ascontiguousarray(lat, dtype=np.float64)
    lon = np.ascontiguousarray(lon, dtype=np.float64)
    return _impl.haversine_matrix(lat, lon, radius)
