"""Deterministic expansion of 32-byte seeds into mask vectors over Z_q.

The stream is AES-256-CTR keyed by the seed with a zero IV; 32-bit words
are drawn little-endian from the keystream and rejection-sampled below the
largest multiple of q, so elements are exactly uniform. Acceptance depends
only on the word sequence, which makes expansions prefix-stable: the first
d1 elements of expand(seed, d2, q) equal expand(seed, d1, q) for d1 < d2.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import kernels
from .field import FieldVector

SEED_BYTES = 32

_ZERO_IV = bytes(16)


@dataclass(frozen=True)
class Seed:
    """Opaque 32-byte mask seed."""

    data: bytes

    def __post_init__(self) -> None:
        if len(self.data) != SEED_BYTES:
            raise ValueError(f"seed must be {SEED_BYTES} bytes, got {len(self.data)}")

    @classmethod
    def fresh(cls, rng: np.random.Generator | None = None) -> "Seed":
        """New random seed; OS entropy unless a generator is supplied.

        Simulations pass a seeded generator for reproducibility; live runs
        leave rng unset.
        """
        if rng is None:
            return cls(secrets.token_bytes(SEED_BYTES))
        return cls(rng.bytes(SEED_BYTES))

    def __repr__(self) -> str:
        return f"Seed({self.data[:4].hex()}..)"


def expand(seed: Seed, dim: int, modulus: int) -> FieldVector:
    """Expand a seed into a length-dim uniform vector over Z_modulus."""
    if dim < 0:
        raise ValueError(f"dim must be >= 0, got {dim}")
    q = int(modulus)
    if not 2 <= q <= 1 << 32:
        raise ValueError(f"modulus must fit 32-bit sampling, got {q}")
    out = np.empty(dim, dtype=np.int64)
    if dim == 0:
        return FieldVector._wrap(out, q)

    limit = ((1 << 32) // q) * q
    enc = Cipher(algorithms.AES(seed.data), modes.CTR(_ZERO_IV)).encryptor()
    filled = 0
    while filled < dim:
        # worst-case acceptance is 1/2; negligible rejection for q near 2^31
        nwords = max(dim - filled + 8, 64)
        keystream = enc.update(bytes(4 * nwords))
        words = np.frombuffer(keystream, dtype="<u4")
        filled = kernels.take_below(words, limit, q, out, filled)
    return FieldVector._wrap(out, q)
