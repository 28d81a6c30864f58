"""Finite-field vectors over Z_q and the stochastic quantizer.

Model updates live in R^d during training but masks only cancel exactly in
a finite field, so updates are clipped, scaled and stochastically rounded
into Z_q before masking, then lifted back to reals after aggregation.

The default modulus is the Mersenne prime 2^31 - 1: elements fit in 32
bits on the wire and int64 accumulators stay exact for sums of up to 2^32
terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

DEFAULT_MODULUS = (1 << 31) - 1
DEFAULT_SCALE = float(1 << 16)
DEFAULT_CLIP = 100.0


class FieldVector:
    """Immutable-by-convention vector of residues mod q, backed by int64."""

    __slots__ = ("values", "modulus")

    def __init__(self, values, modulus: int = DEFAULT_MODULUS):
        q = int(modulus)
        if q < 2:
            raise ValueError(f"modulus must be >= 2, got {q}")
        arr = np.asarray(values, dtype=np.int64) % q
        self.values = arr
        self.modulus = q

    @classmethod
    def _wrap(cls, reduced: np.ndarray, modulus: int) -> "FieldVector":
        # internal: values already in [0, q), skip the reduction pass
        fv = object.__new__(cls)
        fv.values = reduced
        fv.modulus = modulus
        return fv

    @classmethod
    def zeros(cls, dim: int, modulus: int = DEFAULT_MODULUS) -> "FieldVector":
        return cls._wrap(np.zeros(dim, dtype=np.int64), int(modulus))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.values.shape[0]

    def _check_compatible(self, other: "FieldVector") -> None:
        if self.modulus != other.modulus:
            raise ValueError(f"modulus mismatch: {self.modulus} vs {other.modulus}")
        if self.dim != other.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __add__(self, other: "FieldVector") -> "FieldVector":
        self._check_compatible(other)
        return FieldVector._wrap(kernels.mod_add(self.values, other.values, self.modulus), self.modulus)

    def __sub__(self, other: "FieldVector") -> "FieldVector":
        self._check_compatible(other)
        return FieldVector._wrap(kernels.mod_sub(self.values, other.values, self.modulus), self.modulus)

    def scaled(self, c: int) -> "FieldVector":
        """Scalar multiple (c mod q) * self, elementwise."""
        return FieldVector._wrap(
            kernels.mod_scale(self.values, int(c) % self.modulus, self.modulus), self.modulus
        )

    def copy(self) -> "FieldVector":
        return FieldVector._wrap(self.values.copy(), self.modulus)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FieldVector):
            return NotImplemented
        return (
            self.modulus == other.modulus
            and self.dim == other.dim
            and bool(np.array_equal(self.values, other.values))
        )

    def __repr__(self) -> str:
        head = np.array2string(self.values[:8], separator=", ")
        tail = ", ..." if self.dim > 8 else ""
        return f"FieldVector({head}{tail}, dim={self.dim}, q={self.modulus})"


@dataclass(frozen=True)
class QuantizerConfig:
    """Parameters mapping reals into Z_q.

    scale * clip must stay below (q - 1) / 2 so that every clipped value
    lands on the signed-representative half of the field and round-trips
    without wraparound.
    """

    modulus: int = DEFAULT_MODULUS
    scale: float = DEFAULT_SCALE
    clip: float = DEFAULT_CLIP

    def __post_init__(self) -> None:
        if self.modulus < 3:
            raise ValueError("modulus must be >= 3")
        if self.scale <= 0 or self.clip <= 0:
            raise ValueError("scale and clip must be positive")
        if self.scale * self.clip >= (self.modulus - 1) / 2:
            raise ValueError("scale * clip must be < (q - 1) / 2 to avoid wraparound")


def quantize(x, cfg: QuantizerConfig, rng: np.random.Generator) -> FieldVector:
    """Clip, scale and stochastically round a real vector into Z_q.

    Rounding goes up with probability equal to the fractional part, which
    makes the embedding unbiased: E[dequantize(quantize(x), 1)] equals the
    clipped x coordinate-wise.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("quantize requires finite input")
    u = rng.random(arr.shape[0])
    z = kernels.quantize_stochastic(arr, float(cfg.clip), float(cfg.scale), u, cfg.modulus)
    return FieldVector._wrap(z, cfg.modulus)


def dequantize(v: FieldVector, cfg: QuantizerConfig, divisor: float) -> np.ndarray:
    """Lift residues to signed representatives and divide by scale * divisor."""
    if v.modulus != cfg.modulus:
        raise ValueError(f"modulus mismatch: vector {v.modulus}, config {cfg.modulus}")
    if divisor <= 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    signed = kernels.signed_lift(v.values, v.modulus)
    return signed.astype(np.float64) / (cfg.scale * divisor)
