"""Frequency (monobit) and runs tests over a byte string, returning p-values."""

from __future__ import annotations

import math

import numpy as np


def _bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def monobit_test(data: bytes) -> float:
    bits = _bits(data)
    n = bits.size
    s = 2 * int(bits.sum()) - n
    return math.erfc(abs(s) / math.sqrt(2 * n))


def runs_test(data: bytes) -> float:
    bits = _bits(data)
    n = bits.size
    pi = bits.mean()
    if abs(pi - 0.5) >= 2 / math.sqrt(n):
        return 0.0
    runs = 1 + int(np.count_nonzero(bits[1:] != bits[:-1]))
    num = abs(runs - 2 * n * pi * (1 - pi))
    den = 2 * math.sqrt(2 * n) * pi * (1 - pi)
    return math.erfc(num / den)
