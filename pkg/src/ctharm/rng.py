"""Counter-based deterministic random number generation.

Every random draw in this project comes from a splitmix64-style counter
generator: output[i] = mix64(key + (counter + i) * GOLDEN).  Streams are
derived by hashing string/integer tokens into a new key, so adding draws
to one stream never perturbs any other stream, and regeneration from the
same seed is bit-identical across runs and platforms.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int, reduced mod 2**64."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    # vectorized finalizer; uint64 arithmetic wraps mod 2**64 by definition
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _token_to_u64(token) -> int:
    if isinstance(token, (int, np.integer)):
        return int(token) & _MASK64
    if isinstance(token, str):
        # FNV-1a over UTF-8; python's hash() is salted per process, unusable here
        h = 0xCBF29CE484222325
        for byte in token.encode("utf-8"):
            h = ((h ^ byte) * 0x100000001B3) & _MASK64
        return h
    raise TypeError(f"rng tokens must be int or str, got {type(token).__name__}")


class CounterRng:
    """Stateful view over a counter-based stream.

    The instance advances an internal counter as numbers are drawn, so a
    sequence of calls is deterministic given the key and the call order.
    `derive` produces an independent stream and never consumes state.
    """

    __slots__ = ("key", "_counter")

    def __init__(self, key: int):
        self.key = int(key) & _MASK64
        self._counter = 0

    def derive(self, *tokens) -> "CounterRng":
        h = self.key
        for t in tokens:
            h = mix64(h ^ (_token_to_u64(t) + _GOLDEN))
        return CounterRng(h)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        state = np.uint64(self.key) + (idx + np.uint64(1)) * np.uint64(_GOLDEN)
        return _mix64_vec(state)

    def uniforms(self, shape) -> np.ndarray:
        """float64 samples in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape)

    def normals(self, shape) -> np.ndarray:
        """float64 standard normal samples via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] so log never sees zero
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers in [0, bound). Modulo bias is ~bound/2**64, ignored."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self._raw(n) % np.uint64(bound)).astype(np.int64)

    def randint(self, bound: int) -> int:
        return int(self.integers(1, bound)[0])

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, population: int, k: int) -> list[int]:
        """k distinct indices drawn from range(population), order random."""
        if k > population:
            raise ValueError("sample larger than population")
        idx = list(range(population))
        for i in range(k):
            j = i + self.randint(population - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]
