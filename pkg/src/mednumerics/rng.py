"""Counter-based SplitMix64 random stream.

The i-th raw output (i = 1, 2, ...) of a stream seeded with ``s`` is
``mix(s + i * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix`` is the SplitMix64
finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

Uniforms take the top 53 bits: ``(z >> 11) * 2**-53``. Normals use
Box-Muller on consecutive uniform pairs ``(u1, u2)`` with
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``. Everything is plain 64-bit integer
arithmetic, so any language can reproduce the stream bit for bit.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Seedable generator with a numpy-like subset of methods."""

    def __init__(self, seed=0):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = _mix(np.uint64(self.seed) + idx * GOLDEN)
        if size is None:
            return int(z[0])
        return z.reshape(size)

    def random(self, size=None):
        """Uniform doubles in [0, 1)."""
        z = self.next_u64(1 if size is None else size)
        u = (np.asarray(z, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if size is None:
            return float(u[0])
        return u

    def uniform(self, low=0.0, high=1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def normal(self, loc=0.0, scale=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = self.random(2 * n)
        u1, u2 = u[0::2], u[1::2]
        g = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        g = loc + scale * g
        if size is None:
            return float(g[0])
        return g.reshape(size)

    def integers(self, low, high=None, size=None):
        """Integers in [low, high) by scaling a uniform; bias is below 2**-40 for small ranges."""
        if high is None:
            low, high = 0, low
        u = self.random(size)
        return (low + np.floor(u * (high - low))).astype(np.int64) if size is not None else int(low + np.floor(u * (high - low)))

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self):
        """Independent child stream seeded from the next raw output."""
        return SplitMix64(self.next_u64())


def as_generator(rng):
    if rng is None:
        return SplitMix64(0)
    if isinstance(rng, (int, np.integer)):
        return SplitMix64(int(rng))
    return rng
