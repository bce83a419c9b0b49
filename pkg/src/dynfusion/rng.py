"""PCG32 (XSH-RR 64/32) random generator with vectorised bulk draws.

The bulk path advances the LCG with closed-form jump-ahead so large arrays
are produced without a Python loop per value, while yielding exactly the
same stream as repeated single-step calls.
"""

from __future__ import annotations

import zlib

import numpy as np

_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1
_BLOCK = 256


def _jump(mult: int, inc: int, n: int) -> tuple[int, int]:
    """Return (A, C) such that advancing the LCG n steps maps s to A*s + C."""
    acc_mult, acc_plus = 1, 0
    cur_mult, cur_plus = mult, inc
    while n > 0:
        if n & 1:
            acc_mult = (acc_mult * cur_mult) & _MASK64
            acc_plus = (acc_plus * cur_mult + cur_plus) & _MASK64
        cur_plus = ((cur_mult + 1) * cur_plus) & _MASK64
        cur_mult = (cur_mult * cur_mult) & _MASK64
        n >>= 1
    return acc_mult, acc_plus


def _output(states: np.ndarray) -> np.ndarray:
    xorshifted = (((states >> np.uint64(18)) ^ states) >> np.uint64(27)).astype(np.uint32)
    rot = (states >> np.uint64(59)).astype(np.uint32)
    return (xorshifted >> rot) | (xorshifted << ((np.uint32(32) - rot) & np.uint32(31)))


def stream_id(*parts) -> int:
    """Stable stream selector derived from arbitrary labels (e.g. parameter names)."""
    return zlib.crc32("/".join(str(p) for p in parts).encode("utf-8"))


class PCG32:
    """O'Neill's PCG32 with a selectable stream.

    Same (seed, stream) gives the same sequence on every platform: all state
    arithmetic is exact unsigned 64-bit.
    """

    def __init__(self, seed: int = 0, stream: int = 0):
        self.inc = ((int(stream) << 1) | 1) & _MASK64
        self.state = 0
        self._step()
        self.state = (self.state + (int(seed) & _MASK64)) & _MASK64
        self._step()

    def _step(self) -> None:
        self.state = (self.state * _MULT + self.inc) & _MASK64

    def next_u32(self) -> int:
        old = self.state
        self._step()
        return int(_output(np.array([old], dtype=np.uint64))[0])

    def u32(self, n: int) -> np.ndarray:
        """Draw n uint32 values in one shot."""
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.uint32)
        states = np.empty(n, dtype=np.uint64)
        first = min(n, _BLOCK)
        s = self.state
        for i in range(first):
            states[i] = s
            s = (s * _MULT + self.inc) & _MASK64
        filled = first
        with np.errstate(over="ignore"):
            while filled < n:
                a, c = _jump(_MULT, self.inc, filled)
                take = min(filled, n - filled)
                states[filled:filled + take] = states[:take] * np.uint64(a) + np.uint64(c)
                filled += take
        a, c = _jump(_MULT, self.inc, n)
        self.state = (a * self.state + c) & _MASK64
        return _output(states)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Floats in [low, high) with 53 random bits each."""
        raw = self.u32(2 * int(n)).astype(np.uint64)
        hi = raw[0::2] >> np.uint64(5)
        lo = raw[1::2] >> np.uint64(6)
        unit = (hi.astype(np.float64) * 67108864.0 + lo.astype(np.float64)) / 9007199254740992.0
        return low + (high - low) * unit

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals."""
        n = int(n)
        half = (n + 1) // 2
        u1 = 1.0 - self.uniform(half)  # (0, 1]
        u2 = self.uniform(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
        return mean + std * z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """Values in [0, high); Lemire-free simple modulo on 53-bit floats."""
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
