"""Pure-numpy implementations of the hot inner loops.

Fallback for the numba versions in _kernels_numba.py; both backends must
produce bit-identical results (integer arithmetic only, IEEE float ops in
the same order).
"""

import numpy as np


def mod_add(a, b, q):
    return (a + b) % q


def mod_sub(a, b, q):
    return (a - b) % q


def mod_scale(a, c, q):
    # c already reduced below q, so products stay under 2**62 for q < 2**31
    return (a * c) % q


def take_below(words, limit, q, out, start):
    """Rejection-sample uniform residues out of raw 32-bit words.

    Accepts words strictly below `limit` (a multiple of q), reduces them
    mod q into `out` starting at index `start`, and returns the new fill
    count. Words are consumed in order so prefixes are stable.
    """
    if limit >= 1 << 32:
        accepted = words
    else:
        accepted = words[words < np.uint32(limit)]
    room = out.shape[0] - start
    n = min(accepted.shape[0], room)
    out[start:start + n] = accepted[:n].astype(np.int64) % q
    return start + n


def quantize_stochastic(x, clip, scale, u, q):
    y = np.clip(x, -clip, clip) * scale
    f = np.floor(y)
    z = f.astype(np.int64) + (u < (y - f))
    return z % q


def signed_lift(v, q):
    # symmetric representative: e stays if 2e < q, else e - q
    return np.where(2 * v < q, v, v - q)
