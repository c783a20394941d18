# src/signforge/rng.py
"""PCG32 generator shared by every module.

All sampling in signforge goes through `Rng` so that a (seed, stream) pair
reproduces the same numbers on every platform. Per-frame and per-scene
generators are derived with `Rng.derive(index)`: the child stream is a splitmix64
hash of (parent stream, index), so children of different parents never share a
stream and nested derivation stays collision-free.
"""
import math

import numpy as np

MULTIPLIER = 6364136223846793005
MASK_64 = (1 << 64) - 1
MASK_32 = (1 << 32) - 1
MASK_63 = (1 << 63) - 1


def mix64(value: int) -> int:
    """splitmix64 finalizer; a bijection on 64-bit integers."""
    z = (value + 0x9E3779B97F4A7C15) & MASK_64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK_64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK_64
    return z ^ (z >> 31)


class Rng:
    """PCG32 (64-bit state, 64-bit stream, XSH-RR output)."""

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or seed > MASK_64:
            raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.stream = stream & MASK_64
        self.increment = ((self.stream << 1) | 1) & MASK_64
        self.state = 0
        self._step()
        self.state = (self.state + seed) & MASK_64
        self._step()

    def _step(self) -> None:
        self.state = (self.state * MULTIPLIER + self.increment) & MASK_64

    def derive(self, index: int) -> "Rng":
        """Independent generator for item `index` (frame, scene, epoch)."""
        return Rng(self.seed, self.derived_stream(index))

    def derived_stream(self, index: int) -> int:
        # the increment drops bit 63, so derived streams keep 63 bits
        return mix64(self.stream ^ mix64(index)) & MASK_63

    def next_u32(self) -> int:
        old_state = self.state
        self._step()
        xorshifted = (((old_state >> 18) ^ old_state) >> 27) & MASK_32
        rot = (old_state >> 59) & 31
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & MASK_32

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of resolution."""
        hi = self.next_u32() >> 5
        lo = self.next_u32() >> 6
        return (hi * 67108864.0 + lo) / 9007199254740992.0

    def uniform(self, low: float, high: float) -> float:
        if low == high:
            return float(low)
        return low + (high - low) * self.random()

    def integers(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("Bound must be positive")
        if bound == 1:
            return 0
        threshold = ((MASK_32 + 1) - bound) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def normal(self) -> float:
        """Standard normal draw (Box-Muller, cosine branch only)."""
        u1 = self.random()
        u2 = self.random()
        # 1 - u1 lies in (0, 1], so the log is finite
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, shape: tuple[int, ...], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        count = math.prod(shape)
        values = [self.uniform(low, high) for _ in range(count)]
        return np.asarray(values, dtype=np.float64).reshape(shape)

    def normal_array(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        count = math.prod(shape)
        values = [self.normal() * std for _ in range(count)]
        return np.asarray(values, dtype=np.float64).reshape(shape)

    def shuffle(self, seq: list) -> list:
        """Return a Fisher-Yates shuffled copy of `seq`."""
        result = list(seq)
        for i in range(len(result) - 1, 0, -1):
            j = self.integers(i + 1)
            result[i], result[j] = result[j], result[i]
        return result
