"""SplitMix64 stream with Box-Muller normals.

The generator is counter based: the i-th output (1-based) is
``mix(seed + i * GOLDEN)`` mod 2**64, so blocks of draws vectorise.
Doubles take the top 53 bits. Normals consume uniforms in pairs
(u1, u2) -> (r cos t, r sin t) with r = sqrt(-2 ln(1 - u1)), t = 2 pi u2;
an odd request discards the final sine value.
"""
from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * GOLDEN)

    def uniform(self, shape=()) -> np.ndarray | float:
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return float(u[0]) if shape == () else u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray | float:
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        pairs = (n + 1) // 2
        u = self.uniform((pairs, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        t = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(t), r * np.sin(t)], axis=1).reshape(-1)[:n]
        return float(z[0]) if shape == () else z.reshape(shape)

    def integers(self, high: int, size: int | None = None):
        """Uniform integers in [0, high)."""
        u = self.uniform(() if size is None else (size,))
        out = np.minimum(np.floor(np.asarray(u) * high).astype(np.int64), high - 1)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def spawn(self, salt: int) -> "SplitMix64":
        """Independent child stream derived from this seed and ``salt``."""
        child = SplitMix64(self.seed ^ ((int(salt) * 0xD1B54A32D192ED03) & _MASK))
        return SplitMix64(int(child.next_u64(1)[0]))
