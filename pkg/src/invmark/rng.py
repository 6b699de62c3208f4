"""SplitMix64 stream and the samplers built on it.

Everything random in the package (candidate transforms, toy weights, noise
attacks, test sequences) goes through this generator so results are
bit-identical across platforms. The n-th output of a SplitMix64 stream only
depends on ``state + n * GAMMA``, so large draws are vectorised with numpy
``uint64`` arithmetic (which wraps modulo 2**64).
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64(x: int) -> int:
    """One SplitMix64 step seeded at ``x``: returns the first output."""
    return _finalize((x + GAMMA) & MASK64)


def mix_seed(master_seed: int, a: int, b: int = 0) -> int:
    """Derive a stream seed from a master seed and two small integers.

    ``splitmix64`` applied three times to
    ``master ^ (a+1)*GAMMA ^ (b+1)*MIX1`` (all modulo 2**64).
    """
    x = (master_seed & MASK64) ^ (((a + 1) * GAMMA) & MASK64) ^ (((b + 1) * MIX1) & MASK64)
    for _ in range(3):
        x = splitmix64(x)
    return x


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _finalize(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a ``uint64`` array (advances the state)."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1): top 53 bits of each output times 2**-53."""
        bits = self.next_u64_array(n) >> np.uint64(11)
        return bits.astype(np.float64) * (2.0 ** -53)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``; index draw is ``u64 mod (i+1)``."""
        perm = list(range(n))
        if n > 1:
            draws = self.next_u64_array(n - 1)
            bounds = np.arange(n, 1, -1, dtype=np.uint64)
            js = (draws % bounds).tolist()
            for i, j in zip(range(n - 1, 0, -1), js):
                perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws by Box-Muller, both outputs of each pair used."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        return (self.next_u64_array(n) % np.uint64(high)).astype(np.int64)
