"""Counter-based pseudo-random number generation.

The generator is a fixed, documented construction so that every draw is
reproducible across platforms and independent of numpy's RNG internals:

    word(seed, k) = mix64(mix64(seed) + (k + 1) * GOLDEN)   (mod 2^64)

where ``mix64`` is the SplitMix64 finalizer and GOLDEN is the 64-bit golden
ratio constant. A stream is fully described by ``(seed, counter)``; drawing n
words returns ``word(seed, counter) .. word(seed, counter + n - 1)`` and
advances the counter by n. Random access by counter makes parallel and serial
generation identical by construction.

Gaussian variates use the Box-Muller transform on pairs of uniforms; a draw of
n normals always consumes ``2 * ceil(n / 2)`` words so stream positions do not
depend on array shapes beyond the element count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB


def _mix64_np(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


@dataclass
class RngState:
    """Reproducible random stream identified by (seed, counter)."""

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter)
        if self.counter < 0:
            raise ValueError(f"counter must be non-negative, got {self.counter}")

    def clone(self) -> "RngState":
        return RngState(self.seed, self.counter)

    def derive(self, *indices: int) -> "RngState":
        """Independent child stream for a purpose/index path, counter reset to 0.

        Chained as seed' = mix64(seed ^ mix64(index + GOLDEN)) per index, so
        derive(a, b) == derive(a).derive(b).
        """
        s = self.seed
        for idx in indices:
            s = _mix64_int(s ^ _mix64_int((int(idx) & _MASK64) + _GOLDEN))
        return RngState(s)

    def words(self, n: int) -> np.ndarray:
        """Next n raw uint64 words; advances the counter by n."""
        if n < 0:
            raise ValueError(f"word count must be non-negative, got {n}")
        key = np.uint64(_mix64_int(self.seed))
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64_np(key + k * np.uint64(_GOLDEN))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniforms in [0, 1) with 53-bit resolution, float64."""
        n = int(np.prod(shape)) if shape else 1
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normal draws via Box-Muller; consumes 2*ceil(n/2) words."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        w = self.words(2 * m)
        # u1 in (0, 1] so log is finite; u2 in [0, 1)
        u1 = ((w[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (w[m:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = z.astype(dtype, copy=False)
        return z.reshape(shape) if shape else z[0]

    def randint(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers uniform in [low, high); one word per draw.

        Uses modulo reduction; the bias is < range / 2^64 and irrelevant for
        the small ranges used here (timesteps, indices).
        """
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        vals = (self.words(n) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def shuffle(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (Fisher-Yates on drawn words)."""
        perm = np.arange(n)
        if n > 1:
            w = self.words(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(w[n - 1 - i] % np.uint64(i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm
