"""Numba-jitted kernels, mirroring ``_kernels_numpy`` exactly.

Parallelism is only over the batch (or row) axis and every iteration writes
a disjoint output slice, so results are bit-identical for any thread count.
"""

import numpy as np
from numba import njit, prange

_OPTS = dict(cache=True, nogil=True)


@njit(parallel=True, **_OPTS)
def mixer_forward_batch(tokens, W1, b1, W2, b2, Wd, Wr):
    m, n, s = tokens.shape
    L, hid, _ = W1.shape
    d = Wd.shape[0]
    r = Wr.shape[0]

    X = np.empty((L + 1, m, s, n))
    A = np.empty((L, m, s, hid))
    Zp = np.empty((m, d, n))
    v = np.empty((m, d * r))
    nrm = np.empty(m)
    desc = np.empty((m, d * r))

    for i in prange(m):
        F = tokens[i].T.copy()
        X[0, i] = F
        for l in range(L):
            Al = X[l, i] @ W1[l].T + b1[l]
            A[l, i] = Al
            H = np.maximum(0.0, Al)
            X[l + 1, i] = H @ W2[l].T + b2[l] + X[l, i]
        Zpi = Wd @ X[L, i]
        Zp[i] = Zpi
        O = Zpi @ Wr.T
        vi = O.copy().reshape(d * r)
        v[i] = vi
        ni = np.sqrt(np.sum(vi * vi))
        nrm[i] = ni
        desc[i] = vi / ni
    return desc, X, A, Zp, v, nrm


@njit(parallel=True, **_OPTS)
def mixer_backward_batch(upstream, W1, W2, Wd, Wr, X, A, Zp, v, nrm):
    L = A.shape[0]
    m = A.shape[1]
    s = X.shape[2]
    n = X.shape[3]
    hid = A.shape[3]
    d = Wd.shape[0]
    r = Wr.shape[0]

    gW1 = np.zeros((m, L, hid, n))
    gb1 = np.zeros((m, L, hid))
    gW2 = np.zeros((m, L, n, hid))
    gb2 = np.zeros((m, L, n))
    gWd = np.zeros((m, d, s))
    gWr = np.zeros((m, r, n))
    gtokens = np.zeros((m, n, s))

    for i in prange(m):
        ni = nrm[i]
        y = v[i] / ni
        gv = (upstream[i] - y * np.dot(y, upstream[i])) / ni
        GO = gv.copy().reshape(d, r)
        GZp = GO @ Wr
        gWr[i] = GO.T.copy() @ Zp[i]
        gWd[i] = GZp @ X[L, i].T
        GZ = Wd.T.copy() @ GZp
        for l in range(L - 1, -1, -1):
            H = np.maximum(0.0, A[l, i])
            GH = GZ @ W2[l]
            gW2[i, l] = GZ.T.copy() @ H
            gb2[i, l] = np.sum(GZ, axis=0)
            GA = GH * (A[l, i] > 0.0)
            gW1[i, l] = GA.T.copy() @ X[l, i]
            gb1[i, l] = np.sum(GA, axis=0)
            GZ = GA @ W1[l] + GZ
        gtokens[i] = GZ.T
    return gW1, gb1, gW2, gb2, gWd, gWr, gtokens


@njit(parallel=True, **_OPTS)
def haversine_matrix(lat, lon, radius):
    npts = lat.shape[0]
    phi = np.radians(lat)
    lam = np.radians(lon)
    out = np.empty((npts, npts))
    for i in prange(npts):
        dphi = phi - phi[i]
        dlam = lam - lam[i]
        a = np.sin(dphi / 2.0) ** 2 + np.cos(phi[i]) * np.cos(phi) * np.sin(dlam / 2.0) ** 2
        a = np.minimum(a, 1.0)
        out[i] = 2.0 * radius * np.arcsin(np.sqrt(a))
    return out
