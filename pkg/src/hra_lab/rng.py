"""Deterministic, language-portable pseudo-random streams.

Everything random in this package (weight init, synthetic data, batch
sampling) flows through the splitmix64 generator below, so a seed fully
pins every artifact the library produces.  The algorithm is spelled out
here so other implementations can reproduce identical streams:

* state update:  ``state = (state + 0x9E3779B97F4A7C15) mod 2^64``
* output scramble (``mix64``):
  ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
  z *= 0x94D049BB133111EB; z ^= z >> 31``  (all mod 2^64)
* ``uniform()``: ``(output >> 11) * 2**-53`` in ``[0, 1)``
* ``normal()``: Box-Muller on two uniforms ``u1, u2``:
  ``r = sqrt(-2 ln(1 - u1))``, angle ``2 pi u2``; the cosine branch is
  returned first, the sine branch is cached and returned by the next call.
* arrays are filled row-major (C order).
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 output scramble; a bijection on 64-bit values."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive(seed: int, *keys: int | str) -> int:
    """Derive an independent child seed from ``seed`` and a key path.

    Integer keys enter as their 64-bit value; string keys enter as the
    first 8 bytes (big-endian) of their SHA-256 digest.  Each key is
    xor-folded into the running value and scrambled with ``mix64``.
    """
    x = seed & _MASK64
    for key in keys:
        if isinstance(key, str):
            kh = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")
        else:
            kh = int(key) & _MASK64
        x = mix64(x ^ kh)
    return x


class SplitMix64:
    """Sequential splitmix64 stream with uniform/normal/int helpers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return mix64(self._state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def normal(self) -> float:
        if self._spare_normal is not None:
            z, self._spare_normal = self._spare_normal, None
            return z
        u1 = (self.next_u64() >> 11) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log1p(-u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def randint(self, n: int) -> int:
        """Uniform-ish integer in [0, n) via modulo reduction."""
        if n < 1:
            raise ValueError("randint needs n >= 1")
        return self.next_u64() % n

    def uniform_array(self, shape: tuple[int, ...], lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        flat = np.array([self.uniform(lo, hi) for _ in range(n)], dtype=np.float64)
        return flat.reshape(shape)

    def normal_array(self, shape: tuple[int, ...], sigma: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        flat = np.array([sigma * self.normal() for _ in range(n)], dtype=np.float64)
        return flat.reshape(shape)
