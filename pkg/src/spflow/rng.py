"""Seeded PRNG with documented constants for reproducible data generation.

splitmix64 core: state advances by the golden-ratio increment
0x9E3779B97F4A7C15; each output is mixed with the Stafford variant-13
constants (0xBF58476D1CE4E5B9, 0x94D049BB133111EB). Uniform doubles take
the top 53 bits; normals come from Box-Muller.
"""

from __future__ import annotations

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)

    def uniform(self, low=0.0, high=1.0, size=None):
        """Uniform float64 in [low, high) with 53-bit resolution."""
        if size is None:
            u = (self.next_u64() >> 11) * (2.0 ** -53)
            return low + (high - low) * u
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        vals = np.array([(self.next_u64() >> 11) * (2.0 ** -53) for _ in range(n)])
        return (low + (high - low) * vals).reshape(size)

    def normal(self, sigma=1.0, size=None):
        """Gaussian draws via Box-Muller on consecutive uniforms."""
        if size is None:
            return float(self.normal(sigma, 1)[0])
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        m = (n + 1) // 2
        u1 = np.array([max(self.uniform(), 2.0 ** -53) for _ in range(m)])
        u2 = np.array([self.uniform() for _ in range(m)])
        r = np.sqrt(-2.0 * np.log(u1))
        pair = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return (sigma * pair[:n]).reshape(size)

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def unit_vector(self) -> np.ndarray:
        """Uniform direction on the sphere (rejection-sampled from the cube)."""
        while True:
            v = np.array([self.uniform(-1.0, 1.0) for _ in range(3)])
            s = float(v @ v)
            if 1e-4 < s <= 1.0:
                return v / np.sqrt(s)
