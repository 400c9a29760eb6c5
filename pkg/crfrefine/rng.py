"""Fixed 64-bit generators so folds and fixtures reproduce on any platform.

- `mix64` is the splitmix64 finalizer.
- `SplitMix64` is the splitmix64 sequence: output k (k = 1, 2, ...) is
  mix64(seed + k * 0x9E3779B97F4A7C15). Being counter-based, it is drawn in
  numpy blocks.
- `XorShift64Star` is xorshift64* (shifts 12, 25, 27; multiplier
  0x2545F4914F6CDD1D) whose state is seeded with mix64(seed + gamma).
"""
from typing import List, Sequence, TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_XORSHIFT_MULT = 0x2545F4914F6CDD1D

T = TypeVar("T")


def mix64(value: int) -> int:
    z = value & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Independent seed for item `index` of a seeded collection."""
    return mix64((seed & MASK64) ^ mix64((index + 1) * GAMMA))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uint64(self, count: int) -> np.ndarray:
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + count * GAMMA) & MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, count: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.uint64(count) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, count: int) -> np.ndarray:
        """Box-Muller pairs; draws 2 * ceil(count / 2) uniforms."""
        pairs = (count + 1) // 2
        raw = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - raw[:, 0]))
        angle = 2.0 * np.pi * raw[:, 1]
        out = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        return out.reshape(-1)[:count]


class XorShift64Star:
    def __init__(self, seed: int):
        self.state = mix64((seed + GAMMA) & MASK64) or GAMMA

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * _XORSHIFT_MULT) & MASK64

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection, without modulo bias."""
        if bound < 1:
            raise ValueError(f"bound must be positive, got {bound}")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            value = self.next()
            if value < limit:
                return value % bound

    def shuffle(self, items: Sequence[T]) -> List[T]:
        """Fisher-Yates, walking from the last position down."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
