"""Numba-compiled implementations of the hot inner loops.

Must stay bit-identical to _kernels_numpy.py. No fastmath: the stochastic
rounding comparison has to follow IEEE semantics exactly so both backends
quantize the same way.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def mod_add(a, b, q):
    n = a.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        v = (a[i] + b[i]) % q
        out[i] = v
    return out


@njit(cache=True)
def mod_sub(a, b, q):
    n = a.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        v = (a[i] - b[i]) % q
        out[i] = v
    return out


@njit(cache=True)
def mod_scale(a, c, q):
    n = a.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = (a[i] * c) % q
    return out


@njit(cache=True)
def take_below(words, limit, q, out, start):
    pos = start
    n = out.shape[0]
    for i in range(words.shape[0]):
        if pos >= n:
            break
        w = np.int64(words[i])
        if w < limit:
            out[pos] = w % q
            pos += 1
    return pos


@njit(cache=True)
def quantize_stochastic(x, clip, scale, u, q):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        v = x[i]
        if v > clip:
            v = clip
        elif v < -clip:
            v = -clip
        y = v * scale
        f = np.floor(y)
        z = np.int64(f)
        if u[i] < y - f:
            z += 1
        out[i] = z % q
    return out


@njit(cache=True)
def signed_lift(v, q):
    n = v.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        e = v[i]
        out[i] = e if 2 * e < q else e - q
    return out
